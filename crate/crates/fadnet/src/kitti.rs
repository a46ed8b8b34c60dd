//! KITTI-format label and calibration I/O, dimension templates, the
//! train/val split, and training-target construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    encode_center2d, encode_depth, encode_dimensions, remake_label_2d, viewing_angle, Box2D, Box3D,
    CameraIntrinsics, DimensionTemplate, KeypointEstimate,
};
use crate::model::ModelConfig;

/// One annotated object, fields in KITTI label order. `location` is the
/// bottom-face center as labeled; [`ObjectLabel::box3d`] converts to the
/// centroid convention used by the geometry module.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLabel {
    pub category: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// Left, top, right, bottom in pixels.
    pub bbox: [f64; 4],
    /// Height, width, length in meters.
    pub dims: [f64; 3],
    /// Bottom-face center (x, y, z) in camera coordinates, meters.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl ObjectLabel {
    pub fn is_dontcare(&self) -> bool {
        self.category == "DontCare"
    }

    /// Centroid-convention 3D box (KITTI's y points down and marks the
    /// bottom face, so the centroid sits half a height above it).
    pub fn box3d(&self) -> Box3D {
        Box3D {
            x: self.location[0],
            y: self.location[1] - 0.5 * self.dims[0],
            z: self.location[2],
            h: self.dims[0],
            w: self.dims[1],
            l: self.dims[2],
            theta: self.rotation_y,
        }
    }

    /// Build a label from a centroid-convention box.
    pub fn from_box3d(category: &str, b: &Box3D, bbox: Box2D, alpha: f64) -> Self {
        let (l, t, r, bo) = bbox.ltrb();
        ObjectLabel {
            category: category.to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha,
            bbox: [l, t, r, bo],
            dims: [b.h, b.w, b.l],
            location: [b.x, b.y + 0.5 * b.h, b.z],
            rotation_y: b.theta,
        }
    }

    pub fn box2d(&self) -> Box2D {
        Box2D::from_ltrb(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// One frame: id, camera, labels.
#[derive(Debug, Clone)]
pub struct KittiFrame {
    pub id: usize,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<ObjectLabel>,
}

/// Parse a label file: one object per line, 15 whitespace-separated fields
/// (a 16th score field is rejected here; it belongs to result files).
pub fn parse_label_file(text: &str) -> Result<Vec<ObjectLabel>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 {
            return Err(Error::Parse {
                line: lineno + 1,
                detail: format!("expected 15 fields, got {}", fields.len()),
            });
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                detail: format!("non-numeric field {}: `{}`", idx + 1, fields[idx]),
            })
        };
        out.push(ObjectLabel {
            category: fields[0].to_string(),
            truncation: num(1)?,
            occlusion: num(2)? as i32,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        });
    }
    Ok(out)
}

pub fn write_label_file(objects: &[ObjectLabel]) -> String {
    let mut out = String::new();
    for o in objects {
        out.push_str(&format!(
            "{} {:.2} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            o.category,
            o.truncation,
            o.occlusion,
            o.alpha,
            o.bbox[0],
            o.bbox[1],
            o.bbox[2],
            o.bbox[3],
            o.dims[0],
            o.dims[1],
            o.dims[2],
            o.location[0],
            o.location[1],
            o.location[2],
            o.rotation_y,
        ));
    }
    out
}

/// Extract intrinsics from the `P2:` projection row (12 floats). The small
/// translation terms of P2 are dropped; decoding uses K only.
pub fn parse_calib(text: &str) -> Result<CameraIntrinsics> {
    for raw in text.lines() {
        let line = raw.trim();
        let Some(rest) = line.strip_prefix("P2:") else { continue };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: 1, detail: format!("bad P2 value: {e}") })?;
        if vals.len() != 12 {
            return Err(Error::Parse { line: 1, detail: format!("P2 needs 12 floats, got {}", vals.len()) });
        }
        return CameraIntrinsics::new(vals[0], vals[5], vals[2], vals[6]);
    }
    Err(Error::Parse { line: 0, detail: "no P2 row in calibration file".into() })
}

pub fn write_calib(k: &CameraIntrinsics) -> String {
    format!(
        "P2: {:.12e} 0 {:.12e} 0 0 {:.12e} {:.12e} 0 0 0 1 0\n",
        k.fx, k.u0, k.fy, k.v0
    )
}

/// Per-category mean dimensions over all non-DontCare objects.
pub fn dimension_templates(
    frames: &[KittiFrame],
    category_names: &[String],
) -> Result<Vec<DimensionTemplate>> {
    let mut sums: Vec<([f64; 3], usize)> = vec![([0.0; 3], 0); category_names.len()];
    for frame in frames {
        for o in &frame.objects {
            if let Some(idx) = category_names.iter().position(|n| *n == o.category) {
                for a in 0..3 {
                    sums[idx].0[a] += o.dims[a];
                }
                sums[idx].1 += 1;
            }
        }
    }
    let empty: Vec<String> = category_names
        .iter()
        .zip(&sums)
        .filter(|(_, (_, n))| *n == 0)
        .map(|(name, _)| name.clone())
        .collect();
    if !empty.is_empty() {
        return Err(Error::Template(empty));
    }
    sums.into_iter()
        .map(|(s, n)| DimensionTemplate::new(s[0] / n as f64, s[1] / n as f64, s[2] / n as f64))
        .collect()
}

const FULL_KITTI_FRAMES: usize = 7481;
const SPLIT_SEED: u64 = 0x3d0b;

/// Train/val split. The full 7481-frame id range uses the bundled id lists
/// (3712 train / 3769 val); any other id set gets a seeded 50/50 split.
pub fn split_3dop(ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("duplicate frame ids in split input".into()));
    }
    if sorted.len() == FULL_KITTI_FRAMES && sorted[0] == 0 && sorted[FULL_KITTI_FRAMES - 1] == FULL_KITTI_FRAMES - 1 {
        let parse_list = |text: &str| -> Vec<usize> {
            text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().parse().unwrap()).collect()
        };
        return Ok((
            parse_list(include_str!("../data/split_train.txt")),
            parse_list(include_str!("../data/split_val.txt")),
        ));
    }
    let mut shuffled = sorted.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED);
    shuffled.shuffle(&mut rng);
    let mut train: Vec<usize> = shuffled[..shuffled.len() / 2].to_vec();
    let mut val: Vec<usize> = shuffled[shuffled.len() / 2..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

// ── training targets ────────────────────────────────────────────────────

/// Whether depth-hint bins index by the 2D box center row or by the
/// projected 3D centroid row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinSource {
    #[default]
    Center2D,
    Centroid3D,
}

#[derive(Debug, Clone)]
pub struct TargetConfig {
    pub height: usize,
    pub width: usize,
    pub categories: Vec<String>,
    pub templates: Vec<DimensionTemplate>,
    pub bin_source: BinSource,
}

impl TargetConfig {
    pub fn new(model: &ModelConfig, categories: Vec<String>, templates: Vec<DimensionTemplate>) -> Self {
        TargetConfig {
            height: model.height,
            width: model.width,
            categories,
            templates,
            bin_source: BinSource::default(),
        }
    }
}

/// Ground truth for one object at its keypoint cell.
#[derive(Debug, Clone)]
pub struct ObjectTarget {
    pub category: usize,
    /// Stride-4 heatmap cell (column, row).
    pub cell: (usize, usize),
    /// (du2d, dv2d, w, h) of the remade 2D box, input pixels.
    pub g1: [f64; 4],
    /// (dH, dW, dL, cos alpha, sin alpha).
    pub g2: [f64; 5],
    /// Sub-cell residual (du3d, dv3d) of the projected centroid.
    pub g3: [f64; 2],
    /// Encoded depth.
    pub g4: f64,
    /// Ground-truth depth in meters.
    pub depth: f64,
    pub box2d: Box2D,
    pub box3d: Box3D,
    pub alpha: f64,
}

impl ObjectTarget {
    pub fn keypoint(&self) -> KeypointEstimate {
        KeypointEstimate { category: self.category, cell_u: self.cell.0, cell_v: self.cell.1, score: 1.0 }
    }
}

/// Heatmap, per-object regression targets, and depth-hint bins for a frame.
#[derive(Debug, Clone)]
pub struct TrainingTargets {
    /// `C x H/4 x W/4` gaussian heatmap, exactly 1 at each object's cell.
    pub heatmap: Vec<f64>,
    pub heatmap_shape: [usize; 3],
    pub objects: Vec<ObjectTarget>,
    /// Mean object depth per 32-pixel row bin, meters; length H/32.
    pub hint_target: Vec<f64>,
    /// True where a bin holds at least one object center.
    pub hint_mask: Vec<bool>,
    /// Labeled objects dropped (behind camera, outside image, or unknown
    /// category).
    pub excluded: usize,
}

/// Build training targets from a frame. Remakes the 2D boxes from projected
/// 3D corners, renders gaussian peaks at projected centroids, encodes the
/// four regression groups exactly, and bins mean depths by image row.
pub fn build_targets(frame: &KittiFrame, cfg: &TargetConfig) -> Result<TrainingTargets> {
    if cfg.height % 32 != 0 || cfg.width % 32 != 0 {
        return Err(Error::geometry("build_targets", "input extents must be divisible by 32"));
    }
    if cfg.categories.len() != cfg.templates.len() {
        return Err(Error::Input("one dimension template per category is required".into()));
    }
    let (h4, w4) = (cfg.height / 4, cfg.width / 4);
    let bins = cfg.height / 32;
    let c = cfg.categories.len();

    let mut heatmap = vec![0.0; c * h4 * w4];
    let mut objects = Vec::new();
    let mut bin_sum = vec![0.0; bins];
    let mut bin_count = vec![0usize; bins];
    let mut excluded = 0;

    for label in &frame.objects {
        if label.is_dontcare() {
            continue;
        }
        let Some(cat) = cfg.categories.iter().position(|n| *n == label.category) else {
            excluded += 1;
            continue;
        };
        let box3d = label.box3d();
        if box3d.z <= 0.0 {
            excluded += 1;
            continue;
        }
        let Ok(remade) = remake_label_2d(&box3d, &frame.intrinsics) else {
            excluded += 1;
            continue;
        };
        let Ok((u, v)) = frame.intrinsics.project([box3d.x, box3d.y, box3d.z]) else {
            excluded += 1;
            continue;
        };
        if u < 0.0 || v < 0.0 || u >= cfg.width as f64 || v >= cfg.height as f64 {
            excluded += 1;
            continue;
        }

        let cell_u = (u / 4.0) as usize;
        let cell_v = (v / 4.0) as usize;
        let kp = KeypointEstimate { category: cat, cell_u, cell_v, score: 1.0 };
        let (du2d, dv2d) = encode_center2d(&kp, remade.u, remade.v);
        let alpha = viewing_angle(box3d.theta, box3d.x, box3d.z);
        let (dh, dw, dl) = encode_dimensions(&cfg.templates[cat], box3d.h, box3d.w, box3d.l);

        objects.push(ObjectTarget {
            category: cat,
            cell: (cell_u, cell_v),
            g1: [du2d, dv2d, remade.w, remade.h],
            g2: [dh, dw, dl, alpha.cos(), alpha.sin()],
            g3: [u - kp.u(), v - kp.v()],
            g4: encode_depth(box3d.z)?,
            depth: box3d.z,
            box2d: remade,
            box3d,
            alpha,
        });

        draw_gaussian(
            &mut heatmap[cat * h4 * w4..(cat + 1) * h4 * w4],
            h4,
            w4,
            cell_v,
            cell_u,
            gaussian_radius(remade.h / 4.0, remade.w / 4.0, 0.7),
        );

        let bin_v = match cfg.bin_source {
            BinSource::Center2D => remade.v,
            BinSource::Centroid3D => v,
        };
        // boundary rows (and unclipped remade centers) map to the last bin
        let bin = ((bin_v / 32.0) as isize).clamp(0, bins as isize - 1) as usize;
        bin_sum[bin] += box3d.z;
        bin_count[bin] += 1;
    }

    let hint_mask: Vec<bool> = bin_count.iter().map(|&n| n > 0).collect();
    let hint_target: Vec<f64> = bin_sum
        .iter()
        .zip(&bin_count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();

    Ok(TrainingTargets {
        heatmap,
        heatmap_shape: [c, h4, w4],
        objects,
        hint_target,
        hint_mask,
        excluded,
    })
}

/// Keypoint-target gaussian radius for a box of the given heatmap-scale
/// height/width such that any placement with IoU >= `min_overlap` against
/// the annotation still covers the peak (the standard three-case rule).
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w) = (height, width);

    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * c1).max(0.0).sqrt();
    let r1 = (b1 - sq1) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let sq2 = (b2 * b2 - 16.0 * c2).max(0.0).sqrt();
    let r2 = (b2 - sq2) / 8.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (-b3 + sq3) / (2.0 * a3);

    r1.min(r2).min(r3).max(0.0)
}

/// Render `exp(-(du^2+dv^2) / (2 sigma^2))` with sigma = radius/3 into the
/// channel plane, combining overlaps with max; the center cell is exactly 1.
fn draw_gaussian(plane: &mut [f64], h: usize, w: usize, cy: usize, cx: usize, radius: f64) {
    let r = radius.floor().max(0.0) as isize;
    let sigma = radius / 3.0;
    let denom = 2.0 * sigma * sigma;
    for dy in -r..=r {
        for dx in -r..=r {
            let y = cy as isize + dy;
            let x = cx as isize + dx;
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let value = if dy == 0 && dx == 0 {
                1.0
            } else {
                (-((dy * dy + dx * dx) as f64) / denom).exp()
            };
            let cell = &mut plane[y as usize * w + x as usize];
            *cell = cell.max(value);
        }
    }
    // radius can floor to zero; the peak itself is always set
    if r == 0 {
        plane[cy * w + cx] = 1.0;
    }
}

/// Group frames by id for directory-style datasets.
pub fn frames_by_id(frames: Vec<KittiFrame>) -> BTreeMap<usize, KittiFrame> {
    frames.into_iter().map(|f| (f.id, f)).collect()
}
