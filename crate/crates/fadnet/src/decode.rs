//! Network output decoding: heatmap peak extraction, top-K selection, and
//! the closed-form 2D/3D reconstruction into detections.

use crate::error::{Error, Result};
use crate::geometry::{
    decode_center2d, decode_dimensions, decode_location3d, decode_yaw, Box2D, Box3D,
    CameraIntrinsics, DimensionTemplate, KeypointEstimate,
};
use crate::kitti::ObjectLabel;
use crate::model::NetworkOutput;
use crate::tensor::{Graph, Tensor};

/// One decoded prediction.
#[derive(Debug, Clone)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    pub box2d: Box2D,
    pub box3d: Box3D,
    /// Viewing angle, radians.
    pub alpha: f64,
}

/// Plain-value copies of the per-image network outputs.
#[derive(Debug, Clone)]
pub struct OutputMaps {
    pub heatmap: Tensor,
    pub groups: [Tensor; 4],
}

impl OutputMaps {
    pub fn from_graph(g: &Graph, out: &NetworkOutput) -> Self {
        OutputMaps {
            heatmap: g.to_tensor(out.heatmap),
            groups: [
                g.to_tensor(out.groups[0]),
                g.to_tensor(out.groups[1]),
                g.to_tensor(out.groups[2]),
                g.to_tensor(out.groups[3]),
            ],
        }
    }
}

/// Cells that are 3x3 local maxima at or above `threshold`, ties resolved
/// toward the lexicographically smallest (category, column, row), sorted by
/// score descending, at most `topk` kept.
pub fn extract_keypoints(heatmap: &Tensor, threshold: f64, topk: usize) -> Result<Vec<KeypointEstimate>> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::param("extract_keypoints", format!("threshold {threshold} outside (0, 1)")));
    }
    if topk == 0 {
        return Err(Error::param("extract_keypoints", "topk must be >= 1"));
    }
    let shape = heatmap.shape();
    if shape.len() != 3 {
        return Err(Error::dim("extract_keypoints", format!("heatmap must be rank 3, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let values = heatmap.values();

    let mut peaks = Vec::new();
    for cat in 0..c {
        let plane = &values[cat * h * w..(cat + 1) * h * w];
        for v in 0..h {
            for u in 0..w {
                let score = plane[v * w + u];
                if score < threshold {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dv in -1i64..=1 {
                    for du in -1i64..=1 {
                        if dv == 0 && du == 0 {
                            continue;
                        }
                        let (nu, nv) = (u as i64 + du, v as i64 + dv);
                        if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                            continue;
                        }
                        let other = plane[nv as usize * w + nu as usize];
                        if other > score
                            || (other == score && (nu as usize, nv as usize) < (u, v))
                        {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push(KeypointEstimate { category: cat, cell_u: u, cell_v: v, score });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.category, a.cell_u, a.cell_v).cmp(&(b.category, b.cell_u, b.cell_v)))
    });
    peaks.truncate(topk);
    Ok(peaks)
}

/// Decode detections from the 12 regression channels gathered at each
/// keypoint cell. Predicted 2D sizes pass through absolute value; degenerate
/// decodes are dropped and counted.
pub fn decode_detections(
    maps: &OutputMaps,
    keypoints: &[KeypointEstimate],
    k: &CameraIntrinsics,
    templates: &[DimensionTemplate],
) -> Result<(Vec<Detection>, usize)> {
    let shape = maps.heatmap.shape();
    let (h4, w4) = (shape[1], shape[2]);
    let gather = |t: &Tensor, c: usize, v: usize, u: usize| -> f64 {
        let s = t.shape();
        t.values()[(c * s[1] + v) * s[2] + u]
    };

    let mut detections = Vec::new();
    let mut dropped = 0usize;
    for kp in keypoints {
        if kp.cell_u >= w4 || kp.cell_v >= h4 {
            return Err(Error::dim(
                "decode_detections",
                format!("keypoint cell ({}, {}) outside {h4}x{w4} heatmap", kp.cell_u, kp.cell_v),
            ));
        }
        let template = templates.get(kp.category).ok_or_else(|| {
            Error::Input(format!("no dimension template for category {}", kp.category))
        })?;
        let (cu, cv) = (kp.cell_u, kp.cell_v);
        let g1: Vec<f64> = (0..4).map(|c| gather(&maps.groups[0], c, cv, cu)).collect();
        let g2: Vec<f64> = (0..5).map(|c| gather(&maps.groups[1], c, cv, cu)).collect();
        let g3: Vec<f64> = (0..2).map(|c| gather(&maps.groups[2], c, cv, cu)).collect();
        let g4 = gather(&maps.groups[3], 0, cv, cu);

        let (u2d, v2d) = decode_center2d(kp, g1[0], g1[1]);
        let box2d = Box2D { u: u2d, v: v2d, w: g1[2].abs(), h: g1[3].abs() };
        let (bh, bw, bl) = decode_dimensions(template, g2[0], g2[1], g2[2]);
        let Ok(loc) = decode_location3d(kp, g3[0], g3[1], g4, k) else {
            dropped += 1;
            continue;
        };
        let Ok(theta) = decode_yaw(g2[3], g2[4], loc[0], loc[2]) else {
            dropped += 1;
            continue;
        };
        detections.push(Detection {
            category: kp.category,
            score: kp.score,
            box2d,
            box3d: Box3D { x: loc[0], y: loc[1], z: loc[2], h: bh, w: bw, l: bl, theta },
            alpha: g2[4].atan2(g2[3]),
        });
    }
    Ok((detections, dropped))
}

/// Serialize detections in the KITTI result format: the 15 label fields
/// plus the score, one detection per line.
pub fn write_result_file(detections: &[Detection], category_names: &[String]) -> String {
    let mut out = String::new();
    for d in detections {
        let name = category_names.get(d.category).map(String::as_str).unwrap_or("Unknown");
        let (l, t, r, b) = d.box2d.ltrb();
        out.push_str(&format!(
            "{name} -1 -1 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.alpha,
            l,
            t,
            r,
            b,
            d.box3d.h,
            d.box3d.w,
            d.box3d.l,
            d.box3d.x,
            d.box3d.y + 0.5 * d.box3d.h, // centroid back to bottom-face center
            d.box3d.z,
            d.box3d.theta,
            d.score,
        ));
    }
    out
}

/// Parse a KITTI result file (16 whitespace-separated fields, score last).
pub fn parse_result_file(text: &str, category_names: &[String]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 16 {
            return Err(Error::Parse {
                line: lineno + 1,
                detail: format!("expected 16 fields in a result line, got {}", fields.len()),
            });
        }
        let score: f64 = fields[15]
            .parse()
            .map_err(|_| Error::Parse { line: lineno + 1, detail: format!("bad score `{}`", fields[15]) })?;
        let label_line = fields[..15].join(" ");
        let labels = crate::kitti::parse_label_file(&label_line).map_err(|e| match e {
            Error::Parse { detail, .. } => Error::Parse { line: lineno + 1, detail },
            other => other,
        })?;
        let label: &ObjectLabel = &labels[0];
        let category = category_names
            .iter()
            .position(|n| *n == label.category)
            .ok_or_else(|| Error::Input(format!("unknown result category `{}`", label.category)))?;
        out.push(Detection {
            category,
            score,
            box2d: label.box2d(),
            box3d: label.box3d(),
            alpha: label.alpha,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::{build_targets, KittiFrame, ObjectLabel, TargetConfig};

    fn bump_heatmap(h: usize, w: usize, cv: usize, cu: usize, peak: f64) -> Tensor {
        let mut values = vec![0.0; h * w];
        for dv in -1i64..=1 {
            for du in -1i64..=1 {
                let (v, u) = (cv as i64 + dv, cu as i64 + du);
                if v < 0 || u < 0 || v >= h as i64 || u >= w as i64 {
                    continue;
                }
                let fall = if dv == 0 && du == 0 { 1.0 } else { 0.55 };
                values[v as usize * w + u as usize] = peak * fall;
            }
        }
        Tensor::from_vec(vec![1, h, w], values).unwrap()
    }

    #[test]
    fn single_bump_yields_one_keypoint() {
        let hm = bump_heatmap(8, 10, 3, 4, 0.9);
        let kps = extract_keypoints(&hm, 0.25, 100).unwrap();
        assert_eq!(kps.len(), 1);
        assert_eq!((kps[0].cell_u, kps[0].cell_v, kps[0].category), (4, 3, 0));
        assert_eq!(kps[0].score, 0.9);
    }

    #[test]
    fn uniform_heatmap_below_threshold_is_empty() {
        let hm = Tensor::full(vec![1, 6, 6], 0.2);
        assert!(extract_keypoints(&hm, 0.25, 100).unwrap().is_empty());
    }

    #[test]
    fn plateau_resolves_to_lexicographically_smallest_cell() {
        let mut values = vec![0.0; 36];
        values[2 * 6 + 3] = 0.8;
        values[2 * 6 + 4] = 0.8; // horizontally adjacent equal maxima
        let hm = Tensor::from_vec(vec![1, 6, 6], values).unwrap();
        let kps = extract_keypoints(&hm, 0.25, 100).unwrap();
        assert_eq!(kps.len(), 1);
        assert_eq!((kps[0].cell_u, kps[0].cell_v), (3, 2));
    }

    #[test]
    fn scores_are_non_increasing_and_topk_caps_output() {
        let mut values = vec![0.0; 100];
        values[11] = 0.9;
        values[55] = 0.7;
        values[88] = 0.8;
        let hm = Tensor::from_vec(vec![1, 10, 10], values).unwrap();
        let kps = extract_keypoints(&hm, 0.25, 100).unwrap();
        let scores: Vec<f64> = kps.iter().map(|k| k.score).collect();
        assert_eq!(scores, vec![0.9, 0.8, 0.7]);
        assert_eq!(extract_keypoints(&hm, 0.25, 2).unwrap().len(), 2);
        assert!(extract_keypoints(&hm, 0.0, 5).is_err());
        assert!(extract_keypoints(&hm, 0.5, 0).is_err());
    }

    #[test]
    fn zero_offsets_decode_to_one_meter_on_the_keypoint_ray() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 30.0).unwrap();
        let templates = [DimensionTemplate::new(1.6, 1.7, 4.0).unwrap()];
        let maps = OutputMaps {
            heatmap: bump_heatmap(16, 16, 5, 7, 0.8),
            groups: [
                Tensor::zeros(vec![4, 16, 16]),
                {
                    // cos = 1 so the angle pair is non-degenerate
                    let mut t = Tensor::zeros(vec![5, 16, 16]);
                    t.values_mut()[(3 * 16 + 5) * 16 + 7] = 1.0;
                    t
                },
                Tensor::zeros(vec![2, 16, 16]),
                Tensor::zeros(vec![1, 16, 16]),
            ],
        };
        let kps = extract_keypoints(&maps.heatmap, 0.25, 10).unwrap();
        let (dets, dropped) = decode_detections(&maps, &kps, &k, &templates).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert!((d.box3d.z - 1.0).abs() < 1e-12);
        let (u, v) = k.project([d.box3d.x, d.box3d.y, d.box3d.z]).unwrap();
        assert_eq!((u, v), (28.0, 20.0)); // 4 * (7, 5)
        assert_eq!(d.box2d.u, 28.0);
    }

    #[test]
    fn negative_predicted_sizes_become_valid_boxes() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 30.0).unwrap();
        let templates = [DimensionTemplate::new(1.6, 1.7, 4.0).unwrap()];
        let mut g1 = Tensor::zeros(vec![4, 8, 8]);
        g1.values_mut()[(2 * 8 + 2) * 8 + 2] = -12.0;
        g1.values_mut()[(3 * 8 + 2) * 8 + 2] = -6.0;
        let mut g2 = Tensor::zeros(vec![5, 8, 8]);
        g2.values_mut()[(3 * 8 + 2) * 8 + 2] = 1.0;
        let maps = OutputMaps {
            heatmap: bump_heatmap(8, 8, 2, 2, 0.9),
            groups: [g1, g2, Tensor::zeros(vec![2, 8, 8]), Tensor::zeros(vec![1, 8, 8])],
        };
        let kps = extract_keypoints(&maps.heatmap, 0.25, 10).unwrap();
        let (dets, _) = decode_detections(&maps, &kps, &k, &templates).unwrap();
        assert_eq!((dets[0].box2d.w, dets[0].box2d.h), (12.0, 6.0));
    }

    #[test]
    fn exact_target_encodings_reproduce_the_label() {
        // module-level roundtrip: set the maps to the exact target encodings
        let k = CameraIntrinsics::new(700.0, 700.0, 640.0, 192.0).unwrap();
        let template = DimensionTemplate::new(1.6, 1.7, 4.0).unwrap();
        let label = ObjectLabel {
            category: "Car".into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            bbox: [0.0; 4],
            dims: [1.52, 1.71, 4.1],
            location: [-3.1, 2.35, 27.0],
            rotation_y: 0.83,
        };
        let frame = KittiFrame { id: 0, intrinsics: k, objects: vec![label.clone()] };
        let tc = TargetConfig {
            height: 384,
            width: 1280,
            categories: vec!["Car".to_string()],
            templates: vec![template],
            bin_source: Default::default(),
        };
        let targets = build_targets(&frame, &tc).unwrap();
        let obj = &targets.objects[0];
        let (h4, w4) = (96, 320);
        let place = |vals: &[f64]| {
            let mut t = Tensor::zeros(vec![vals.len(), h4, w4]);
            for (c, v) in vals.iter().enumerate() {
                t.values_mut()[(c * h4 + obj.cell.1) * w4 + obj.cell.0] = *v;
            }
            t
        };
        let maps = OutputMaps {
            heatmap: {
                let mut t = Tensor::zeros(vec![1, h4, w4]);
                t.values_mut()[obj.cell.1 * w4 + obj.cell.0] = 0.95;
                t
            },
            groups: [place(&obj.g1), place(&obj.g2), place(&obj.g3), place(&[obj.g4])],
        };
        let kps = extract_keypoints(&maps.heatmap, 0.25, 10).unwrap();
        let (dets, dropped) = decode_detections(&maps, &kps, &k, &[template]).unwrap();
        assert_eq!((dets.len(), dropped), (1, 0));
        let d = &dets[0];
        let b = label.box3d();
        assert!((d.box3d.x - b.x).abs() < 1e-6);
        assert!((d.box3d.y - b.y).abs() < 1e-6);
        assert!((d.box3d.z - b.z).abs() < 1e-6);
        assert!((d.box3d.h - b.h).abs() < 1e-6);
        assert!((d.box3d.w - b.w).abs() < 1e-6);
        assert!((d.box3d.l - b.l).abs() < 1e-6);
        assert!((d.box3d.theta - b.theta).abs() < 1e-6);
        assert!((d.box2d.u - obj.box2d.u).abs() < 1e-6);
        assert!((d.box2d.h - obj.box2d.h).abs() < 1e-6);
        assert!((d.alpha - obj.alpha).abs() < 1e-6);
    }

    #[test]
    fn result_file_roundtrip() {
        let names = vec!["Car".to_string()];
        let dets = vec![Detection {
            category: 0,
            score: 0.87,
            box2d: Box2D { u: 100.0, v: 50.0, w: 40.0, h: 30.0 },
            box3d: Box3D { x: -2.0, y: 0.9, z: 31.5, h: 1.6, w: 1.7, l: 4.2, theta: -0.4 },
            alpha: -1.2,
        }];
        let text = write_result_file(&dets, &names);
        assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 16);
        let parsed = parse_result_file(&text, &names).unwrap();
        assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        assert!((p.score - 0.87).abs() < 1e-9);
        assert!((p.box3d.z - 31.5).abs() < 1e-9);
        assert!((p.box3d.y - 0.9).abs() < 1e-9); // bottom-center conversion inverts
        assert!((p.box2d.u - 100.0).abs() < 1e-9);

        assert!(parse_result_file("Car 0 0 0 0 0 0 0\n", &names).is_err());
    }
}
