//! KITTI-style evaluation: 2D/BEV/3D IoU, greedy matching, interpolated
//! average precision (11- and 40-point), average orientation similarity,
//! difficulty filtering, and the 2D-3D consistency / depth-vs-row
//! statistics.

use std::collections::BTreeMap;

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::geometry::{remake_label_2d, Box2D, Box3D, CameraIntrinsics, CORNER_SIGNS};

// ── IoU family ──────────────────────────────────────────────────────────

/// Axis-aligned IoU; zero for a zero-area union.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let (al, at, ar, ab) = a.ltrb();
    let (bl, bt, br, bb) = b.ltrb();
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ground-plane footprint of a 3D box: 4 (x, z) corners in cycle order.
pub fn bev_footprint(b: &Box3D) -> [[f64; 2]; 4] {
    let (c, s) = (b.theta.cos(), b.theta.sin());
    // cycle through the sign pairs so consecutive corners share an edge
    let cycle = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)];
    let mut out = [[0.0; 2]; 4];
    for (i, (sx, sz)) in cycle.into_iter().enumerate() {
        let ox = sx * 0.5 * b.w;
        let oz = sz * 0.5 * b.l;
        out[i] = [b.x + c * ox + s * oz, b.z - s * ox + c * oz];
    }
    out
}

/// Signed shoelace area (positive for counter-clockwise order).
fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    0.5 * acc
}

/// Clip `subject` by convex `clip` (Sutherland-Hodgman). Both are point
/// lists in cycle order; the result may be empty.
pub fn sutherland_hodgman(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut clip: Vec<[f64; 2]> = clip.to_vec();
    if signed_area(&clip) < 0.0 {
        clip.reverse();
    }
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let inside = |p: &[f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: &[f64; 2], q: &[f64; 2]| -> [f64; 2] {
            let dc = [a[0] - b[0], a[1] - b[1]];
            let dp = [p[0] - q[0], p[1] - q[1]];
            let n1 = a[0] * b[1] - a[1] * b[0];
            let n2 = p[0] * q[1] - p[1] * q[0];
            let denom = dc[0] * dp[1] - dc[1] * dp[0];
            [(n1 * dp[0] - n2 * dc[0]) / denom, (n1 * dp[1] - n2 * dc[1]) / denom]
        };

        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        for p in input {
            if inside(&p) {
                if !inside(&prev) {
                    output.push(intersect(&prev, &p));
                }
                output.push(p);
            } else if inside(&prev) {
                output.push(intersect(&prev, &p));
            }
            prev = p;
        }
    }
    output
}

/// Rotated-rectangle IoU in the ground plane.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.w * a.l;
    let area_b = b.w * b.l;
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter_poly = sutherland_hodgman(&bev_footprint(a), &bev_footprint(b));
    let inter = if inter_poly.len() < 3 { 0.0 } else { signed_area(&inter_poly).abs() };
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Volumetric IoU: BEV intersection times the vertical interval overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let vol_a = a.w * a.l * a.h;
    let vol_b = b.w * b.l * b.h;
    if vol_a <= 0.0 || vol_b <= 0.0 {
        return 0.0;
    }
    let inter_poly = sutherland_hodgman(&bev_footprint(a), &bev_footprint(b));
    let inter_area = if inter_poly.len() < 3 { 0.0 } else { signed_area(&inter_poly).abs() };
    let y_overlap = ((a.y + 0.5 * a.h).min(b.y + 0.5 * b.h) - (a.y - 0.5 * a.h).max(b.y - 0.5 * b.h)).max(0.0);
    let inter = inter_area * y_overlap;
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Monte-Carlo estimate of the BEV IoU by uniform sampling over the joint
/// bounding rectangle; the independent oracle for the clipping path.
pub fn iou_bev_monte_carlo(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let fa = bev_footprint(a);
    let fb = bev_footprint(b);
    let xs = fa.iter().chain(&fb).map(|p| p[0]);
    let zs = fa.iter().chain(&fb).map(|p| p[1]);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (z0, z1) = (zs.clone().fold(f64::INFINITY, f64::min), zs.fold(f64::NEG_INFINITY, f64::max));
    let inside = |bx: &Box3D, px: f64, pz: f64| {
        let (c, s) = (bx.theta.cos(), bx.theta.sin());
        let (dx, dz) = (px - bx.x, pz - bx.z);
        let ox = c * dx - s * dz;
        let oz = s * dx + c * dz;
        ox.abs() <= 0.5 * bx.w && oz.abs() <= 0.5 * bx.l
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut in_union, mut in_both) = (0u64, 0u64);
    for _ in 0..samples {
        let px = rng.gen_range(x0..=x1);
        let pz = rng.gen_range(z0..=z1);
        let ia = inside(a, px, pz);
        let ib = inside(b, px, pz);
        if ia || ib {
            in_union += 1;
        }
        if ia && ib {
            in_both += 1;
        }
    }
    if in_union == 0 {
        0.0
    } else {
        in_both as f64 / in_union as f64
    }
}

// ── difficulty ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

/// Standard KITTI protocol thresholds: minimum 2D height 40/25/25 px,
/// maximum occlusion 0/1/2, maximum truncation 0.15/0.30/0.50.
pub fn difficulty_filter(truncation: f64, occlusion: i32, box2d_height: f64) -> Difficulty {
    let h = box2d_height;
    if h >= 40.0 && occlusion <= 0 && truncation <= 0.15 {
        Difficulty::Easy
    } else if h >= 25.0 && occlusion <= 1 && truncation <= 0.30 {
        Difficulty::Moderate
    } else if h >= 25.0 && occlusion <= 2 && truncation <= 0.50 {
        Difficulty::Hard
    } else {
        Difficulty::Ignored
    }
}

// ── matching and average precision ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Ap2d,
    ApBev,
    Ap3d,
    Aos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    R11,
    R40,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub kind: MetricKind,
    pub interpolation: Interpolation,
    pub difficulty: Difficulty,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.iou_threshold && self.iou_threshold < 1.0) {
            return Err(Error::param("eval", format!("IoU threshold {} outside (0,1)", self.iou_threshold)));
        }
        if self.difficulty == Difficulty::Ignored {
            return Err(Error::param("eval", "difficulty must be Easy, Moderate or Hard"));
        }
        Ok(())
    }
}

/// One ground-truth object prepared for evaluation. `category` is `None`
/// for DontCare regions, which absorb detections of any category.
#[derive(Debug, Clone)]
pub struct EvalGt {
    pub category: Option<usize>,
    pub box2d: Box2D,
    pub box3d: Box3D,
    pub alpha: f64,
    pub difficulty: Difficulty,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub detections: Vec<Detection>,
    pub gts: Vec<EvalGt>,
}

fn pair_iou(kind: MetricKind, det: &Detection, gt: &EvalGt) -> f64 {
    match kind {
        MetricKind::Ap2d | MetricKind::Aos => iou_2d(&det.box2d, &gt.box2d),
        MetricKind::ApBev => iou_bev(&det.box3d, &gt.box3d),
        MetricKind::Ap3d => iou_3d(&det.box3d, &gt.box3d),
    }
}

/// Outcome of one detection after greedy matching.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    score: f64,
    /// image index, detection index (tie-break key)
    order: (usize, usize),
    kind: OutcomeKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum OutcomeKind {
    TruePositive { similarity: f64 },
    FalsePositive,
    /// Matched a gt outside the difficulty filter: neither TP nor FP.
    IgnoredMatch,
}

/// Greedy per-image matching: detections in descending score claim the
/// unmatched same-category gt of highest IoU at or above the threshold.
/// A claimed out-of-difficulty gt yields neither a TP nor an FP.
fn match_frames(frames: &[EvalFrame], cfg: &EvalConfig, min_score: f64) -> (Vec<Outcome>, usize) {
    let relevant = |gt: &EvalGt| gt.difficulty <= cfg.difficulty;
    let mut outcomes = Vec::new();
    let mut n_relevant = 0usize;
    for (fi, frame) in frames.iter().enumerate() {
        n_relevant += frame.gts.iter().filter(|g| relevant(g)).count();
        let mut order: Vec<usize> = (0..frame.detections.len())
            .filter(|i| frame.detections[*i].score >= min_score)
            .collect();
        order.sort_by(|&a, &b| {
            frame.detections[b]
                .score
                .partial_cmp(&frame.detections[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut claimed = vec![false; frame.gts.len()];
        for di in order {
            let det = &frame.detections[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in frame.gts.iter().enumerate() {
                if claimed[gi] || gt.category.map_or(false, |c| c != det.category) {
                    continue;
                }
                let iou = pair_iou(cfg.kind, det, gt);
                if iou < cfg.iou_threshold {
                    continue;
                }
                if best.map(|(_, b)| iou > b).unwrap_or(true) {
                    best = Some((gi, iou));
                }
            }
            let kind = match best {
                None => OutcomeKind::FalsePositive,
                Some((gi, _)) => {
                    claimed[gi] = true;
                    let gt = &frame.gts[gi];
                    if relevant(gt) {
                        OutcomeKind::TruePositive {
                            similarity: 0.5 * (1.0 + (gt.alpha - det.alpha).cos()),
                        }
                    } else {
                        OutcomeKind::IgnoredMatch
                    }
                }
            };
            outcomes.push(Outcome { score: det.score, order: (fi, di), kind });
        }
    }
    (outcomes, n_relevant)
}

fn recall_samples(interp: Interpolation) -> Vec<f64> {
    match interp {
        Interpolation::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
        Interpolation::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
    }
}

/// Precision/recall (and similarity-precision) points at every score
/// threshold boundary of the global sweep.
fn pr_points(outcomes: &mut Vec<Outcome>, n_relevant: usize) -> Vec<(f64, f64, f64)> {
    outcomes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.order.cmp(&b.order)));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut sim_sum = 0.0;
    let mut i = 0;
    while i < outcomes.len() {
        // consume the whole tie group before emitting a point
        let score = outcomes[i].score;
        while i < outcomes.len() && outcomes[i].score == score {
            match outcomes[i].kind {
                OutcomeKind::TruePositive { similarity } => {
                    tp += 1;
                    sim_sum += similarity;
                }
                OutcomeKind::FalsePositive => fp += 1,
                OutcomeKind::IgnoredMatch => {}
            }
            i += 1;
        }
        if tp + fp > 0 && n_relevant > 0 {
            points.push((
                tp as f64 / n_relevant as f64,
                tp as f64 / (tp + fp) as f64,
                sim_sum / (tp + fp) as f64,
            ));
        }
    }
    points
}

fn interpolate(points: &[(f64, f64, f64)], interp: Interpolation, use_similarity: bool) -> f64 {
    let samples = recall_samples(interp);
    let mut total = 0.0;
    for r in &samples {
        let best = points
            .iter()
            .filter(|(recall, _, _)| *recall >= *r - 1e-12)
            .map(|(_, p, s)| if use_similarity { *s } else { *p })
            .fold(0.0, f64::max);
        total += best;
    }
    total / samples.len() as f64
}

/// Interpolated average precision over all frames.
pub fn average_precision(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let (mut outcomes, n_relevant) = match_frames(frames, cfg, f64::NEG_INFINITY);
    let points = pr_points(&mut outcomes, n_relevant);
    Ok(interpolate(&points, cfg.interpolation, false))
}

/// Average orientation similarity: AP matching with each true positive
/// weighted by (1 + cos(alpha_gt - alpha_det)) / 2.
pub fn aos(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let (mut outcomes, n_relevant) = match_frames(frames, cfg, f64::NEG_INFINITY);
    let points = pr_points(&mut outcomes, n_relevant);
    Ok(interpolate(&points, cfg.interpolation, true))
}

/// Brute-force reference: re-run the matching from scratch at every
/// distinct score threshold and interpolate over the resulting points.
/// Must agree exactly with [`average_precision`] / [`aos`].
pub fn average_precision_brute_force(frames: &[EvalFrame], cfg: &EvalConfig, use_similarity: bool) -> Result<f64> {
    cfg.validate()?;
    let mut thresholds: Vec<f64> =
        frames.iter().flat_map(|f| f.detections.iter().map(|d| d.score)).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = Vec::new();
    for t in thresholds {
        let (mut outcomes, n_relevant) = match_frames(frames, cfg, t);
        // accumulate in global score order so the floating-point sums are
        // bit-identical to the sweep's
        outcomes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.order.cmp(&b.order)));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut sim = 0.0;
        for o in outcomes {
            match o.kind {
                OutcomeKind::TruePositive { similarity } => {
                    tp += 1;
                    sim += similarity;
                }
                OutcomeKind::FalsePositive => fp += 1,
                OutcomeKind::IgnoredMatch => {}
            }
        }
        if tp + fp > 0 && n_relevant > 0 {
            points.push((tp as f64 / n_relevant as f64, tp as f64 / (tp + fp) as f64, sim / (tp + fp) as f64));
        }
    }
    Ok(interpolate(&points, cfg.interpolation, use_similarity))
}

// ── analysis statistics ─────────────────────────────────────────────────

/// Mean IoU between each detection's 2D box and the projection of its own
/// 3D box, bucketed by predicted depth (left-closed intervals). Detections
/// whose 3D box cannot be projected are skipped.
pub fn consistency_stat(
    detections: &[Detection],
    k: &CameraIntrinsics,
    buckets: &[(f64, f64)],
) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0, 0usize); buckets.len()];
    for det in detections {
        let Ok(projected) = remake_label_2d(&det.box3d, k) else { continue };
        let iou = iou_2d(&det.box2d, &projected);
        for (bi, (lo, hi)) in buckets.iter().enumerate() {
            if det.box3d.z >= *lo && det.box3d.z < *hi {
                sums[bi].0 += iou;
                sums[bi].1 += 1;
                break;
            }
        }
    }
    sums.into_iter().map(|(s, n)| if n > 0 { Some(s / n as f64) } else { None }).collect()
}

/// Default depth buckets for the consistency statistic, meters.
pub const CONSISTENCY_BUCKETS: [(f64, f64); 3] = [(0.0, 15.0), (15.0, 30.0), (30.0, 45.0)];

/// Mean ground-truth depth per vertical image band: entries are
/// (2D center row, depth); bands are `bucket_px` rows wide.
pub fn depth_row_stat(entries: &[(f64, f64)], bucket_px: usize) -> Result<BTreeMap<usize, f64>> {
    if bucket_px == 0 {
        return Err(Error::param("depth_row_stat", "bucket size must be >= 1 px"));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (v, z) in entries {
        if *v < 0.0 {
            continue;
        }
        let bucket = (*v as usize / bucket_px) * bucket_px;
        let e = sums.entry(bucket).or_insert((0.0, 0));
        e.0 += z;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect())
}

/// Prepare ground truth for evaluation: remake each label's 2D box from
/// its projected 3D corners (falling back to the labeled box when a corner
/// sits behind the camera), grade difficulty from the remade height, and
/// turn DontCare rows into category-wildcard ignored regions.
pub fn eval_gts_from_labels(
    labels: &[crate::kitti::ObjectLabel],
    k: &CameraIntrinsics,
    category_names: &[String],
) -> Vec<EvalGt> {
    let mut out = Vec::new();
    for label in labels {
        if label.is_dontcare() {
            out.push(EvalGt {
                category: None,
                box2d: label.box2d(),
                box3d: label.box3d(),
                alpha: label.alpha,
                difficulty: Difficulty::Ignored,
            });
            continue;
        }
        let Some(cat) = category_names.iter().position(|n| *n == label.category) else { continue };
        let box3d = label.box3d();
        let box2d = remake_label_2d(&box3d, k).unwrap_or_else(|_| label.box2d());
        let difficulty = difficulty_filter(label.truncation, label.occlusion, box2d.h);
        out.push(EvalGt { category: Some(cat), box2d, box3d, alpha: label.alpha, difficulty });
    }
    out
}

/// CSV rows for metric reports: metric, difficulty, threshold, value.
pub fn metric_csv_row(kind: MetricKind, difficulty: Difficulty, threshold: f64, value: f64) -> String {
    let kind = match kind {
        MetricKind::Ap2d => "ap2d",
        MetricKind::ApBev => "apbev",
        MetricKind::Ap3d => "ap3d",
        MetricKind::Aos => "aos",
    };
    format!("{kind},{difficulty:?},{threshold},{value:.6}\n")
}

/// Corners of a 3D box projected to exactly the remade 2D box: helper for
/// constructing self-consistent detections in tests and the consistency
/// statistic's oracle.
pub fn self_consistent_box2d(b: &Box3D, k: &CameraIntrinsics) -> Result<Box2D> {
    remake_label_2d(b, k)
}

/// All eight 3D corner sign patterns, re-exported for BEV checks.
pub fn corner_signs() -> &'static [[f64; 3]; 8] {
    &CORNER_SIGNS
}
