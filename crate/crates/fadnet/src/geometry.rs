//! Closed-form geometry: pinhole projection, box encode/decode, corner
//! transforms, viewing-angle/yaw conversion, and 2D label remaking.
//!
//! Camera convention: x right, y down, z forward (KITTI camera frame);
//! yaw rotates about the vertical y axis. All operations are pure.

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// Pinhole intrinsics (the K matrix without skew).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, u0: f64, v0: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::param("intrinsics", format!("focal lengths must be positive: {fx}, {fy}")));
        }
        Ok(CameraIntrinsics { fx, fy, u0, v0 })
    }

    /// Project a camera-frame point with z > 0 onto the image plane.
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        if p[2] <= 0.0 {
            return Err(Error::degenerate("project", format!("point behind camera, z = {}", p[2])));
        }
        Ok((self.fx * p[0] / p[2] + self.u0, self.fy * p[1] / p[2] + self.v0))
    }

    /// Invert the projection at a known depth.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [z * (u - self.u0) / self.fx, z * (v - self.v0) / self.fy, z]
    }
}

/// Axis-aligned 2D box stored as center and size, in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn from_ltrb(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Box2D {
            u: 0.5 * (left + right),
            v: 0.5 * (top + bottom),
            w: right - left,
            h: bottom - top,
        }
    }

    pub fn ltrb(&self) -> (f64, f64, f64, f64) {
        (self.u - 0.5 * self.w, self.v - 0.5 * self.h, self.u + 0.5 * self.w, self.v + 0.5 * self.h)
    }
}

/// Oriented 3D box: centroid in camera coordinates (meters), dimensions
/// (meters) and yaw about the camera y axis, wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Height (extent along y).
    pub h: f64,
    /// Width (extent along x before rotation).
    pub w: f64,
    /// Length (extent along z before rotation).
    pub l: f64,
    pub theta: f64,
}

/// Per-category mean dimensions in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionTemplate {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl DimensionTemplate {
    pub fn new(h: f64, w: f64, l: f64) -> Result<Self> {
        if h <= 0.0 || w <= 0.0 || l <= 0.0 {
            return Err(Error::param("template", format!("dimensions must be positive: {h}, {w}, {l}")));
        }
        Ok(DimensionTemplate { h, w, l })
    }
}

/// A heatmap peak: integer stride-4 cell plus category and score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointEstimate {
    pub category: usize,
    /// Heatmap column index.
    pub cell_u: usize,
    /// Heatmap row index.
    pub cell_v: usize,
    pub score: f64,
}

impl KeypointEstimate {
    /// Keypoint u in input pixels (cell index times the output stride 4).
    pub fn u(&self) -> f64 {
        4.0 * self.cell_u as f64
    }

    pub fn v(&self) -> f64 {
        4.0 * self.cell_v as f64
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

// ── center / depth / dimension / angle codecs ───────────────────────────

/// 2D center from keypoint plus regressed offsets.
pub fn decode_center2d(kp: &KeypointEstimate, du2d: f64, dv2d: f64) -> (f64, f64) {
    (kp.u() + du2d, kp.v() + dv2d)
}

pub fn encode_center2d(kp: &KeypointEstimate, u2d: f64, v2d: f64) -> (f64, f64) {
    (u2d - kp.u(), v2d - kp.v())
}

/// Depth in meters from its encoded value: `d = 1/sigmoid(enc) - 1`.
pub fn decode_depth(encoded: f64) -> f64 {
    1.0 / sigmoid(encoded) - 1.0
}

/// Algebraic inverse of [`decode_depth`]: `enc = -ln(d)`.
pub fn encode_depth(d: f64) -> Result<f64> {
    if d <= 0.0 {
        return Err(Error::domain("encode_depth", format!("depth must be positive, got {d}")));
    }
    Ok(-d.ln())
}

/// 3D centroid from keypoint, sub-cell offsets, encoded depth and intrinsics.
pub fn decode_location3d(
    kp: &KeypointEstimate,
    du3d: f64,
    dv3d: f64,
    encoded_depth: f64,
    k: &CameraIntrinsics,
) -> Result<[f64; 3]> {
    let z = decode_depth(encoded_depth);
    if z <= 0.0 {
        return Err(Error::degenerate("decode_location3d", format!("non-positive depth {z}")));
    }
    Ok(k.back_project(kp.u() + du3d, kp.v() + dv3d, z))
}

pub fn decode_dimensions(template: &DimensionTemplate, dh: f64, dw: f64, dl: f64) -> (f64, f64, f64) {
    (template.h * dh.exp(), template.w * dw.exp(), template.l * dl.exp())
}

pub fn encode_dimensions(template: &DimensionTemplate, h: f64, w: f64, l: f64) -> (f64, f64, f64) {
    ((h / template.h).ln(), (w / template.w).ln(), (l / template.l).ln())
}

/// Yaw from the regressed viewing-angle pair and the decoded location:
/// `theta = alpha + arctan(x/z)`, with atan2 handling z = 0.
pub fn decode_yaw(cos_a: f64, sin_a: f64, x: f64, z: f64) -> Result<f64> {
    if cos_a == 0.0 && sin_a == 0.0 {
        return Err(Error::degenerate("decode_yaw", "zero angle pair"));
    }
    let alpha = sin_a.atan2(cos_a);
    Ok(wrap_angle(alpha + x.atan2(z)))
}

/// Viewing angle from yaw and location (inverse of [`decode_yaw`]).
pub fn viewing_angle(theta: f64, x: f64, z: f64) -> f64 {
    wrap_angle(theta - x.atan2(z))
}

// ── corner transforms ───────────────────────────────────────────────────

/// Corners of a 2D box in the order TL, TR, BL, BR.
pub fn corners2d(b: &Box2D) -> [[f64; 2]; 4] {
    let (l, t, r, bo) = b.ltrb();
    [[l, t], [r, t], [l, bo], [r, bo]]
}

/// Sign pattern (sx, sy, sz) of the 8 corners, in a fixed order: sx scales
/// W/2, sy scales H/2, sz scales L/2, with + preceding -.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, -1.0, -1.0],
];

/// The 8 corners of an oriented 3D box: offsets (±W/2, ±H/2, ±L/2) rotated
/// about the y axis by theta, then translated to the centroid. With
/// R = [[cos,0,sin],[0,1,0],[-sin,0,cos]], theta = pi/2 maps the (W/2,0,0)
/// offset onto the -z axis.
pub fn corners3d(b: &Box3D) -> [[f64; 3]; 8] {
    let (c, s) = (b.theta.cos(), b.theta.sin());
    let mut out = [[0.0; 3]; 8];
    for (corner, signs) in out.iter_mut().zip(&CORNER_SIGNS) {
        let ox = signs[0] * 0.5 * b.w;
        let oy = signs[1] * 0.5 * b.h;
        let oz = signs[2] * 0.5 * b.l;
        *corner = [b.x + c * ox + s * oz, b.y + oy, b.z - s * ox + c * oz];
    }
    out
}

/// Tight 2D box around the projected corners of a 3D box, not clipped to
/// the image bounds. Fails if any corner lies behind the camera.
pub fn remake_label_2d(b: &Box3D, k: &CameraIntrinsics) -> Result<Box2D> {
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for corner in corners3d(b) {
        let (u, v) = k
            .project(corner)
            .map_err(|_| Error::degenerate("remake_label_2d", format!("corner behind camera for box at z = {}", b.z)))?;
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
    }
    Ok(Box2D::from_ltrb(min_u, min_v, max_u, max_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, FRAC_PI_2, FRAC_PI_4, PI};

    fn kp(cell_u: usize, cell_v: usize) -> KeypointEstimate {
        KeypointEstimate { category: 0, cell_u, cell_v, score: 0.9 }
    }

    #[test]
    fn center2d_decode_is_addition_and_invertible() {
        let k = kp(25, 12); // scales to (100, 48)... pixels below
        assert_eq!(decode_center2d(&k, 0.0, 2.0), (100.0, 50.0));
        assert_eq!(decode_center2d(&k, -3.5, 4.25), (96.5, 52.25));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (u, v) = (rng.gen_range(0.0..320.0), rng.gen_range(0.0..96.0));
            let (du, dv) = encode_center2d(&k, u, v);
            assert_eq!(decode_center2d(&k, du, dv), (u, v));
        }
    }

    #[test]
    fn depth_codec() {
        assert!((decode_depth(0.0) - 1.0).abs() < 1e-12);
        assert!((encode_depth(E).unwrap() + 1.0) < 1e-12);
        for d in [0.1, 1.0, 10.0, 45.0, 80.0] {
            let rt = decode_depth(encode_depth(d).unwrap());
            assert!((rt - d).abs() < 1e-9, "roundtrip {d} -> {rt}");
        }
        assert!(encode_depth(0.0).is_err());
        assert!(encode_depth(-2.0).is_err());
    }

    #[test]
    fn depth_decode_two_routes_agree() {
        // 1/sigmoid(enc) - 1 collapses algebraically to exp(-enc)
        for enc in [-4.0, -1.0, 0.0, 0.5, 3.0] {
            assert!((decode_depth(enc) - (-enc).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn location3d_on_principal_ray_and_reprojection() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 30.0).unwrap();
        // principal ray: u = u0, v = v0
        let kp0 = kp(12, 7); // 48, 28
        let z = 10.0;
        let p = decode_location3d(&kp0, 2.0, 2.0, encode_depth(z).unwrap(), &k).unwrap();
        assert!(p[0].abs() < 1e-9 && p[1].abs() < 1e-9 && (p[2] - z).abs() < 1e-9);

        // spec-style numeric case: keypoint at pixels (60, 40), offsets 0.5
        let kp1 = kp(15, 10);
        let p = decode_location3d(&kp1, 0.5, 0.5, encode_depth(10.0).unwrap(), &k).unwrap();
        assert!((p[0] - 1.05).abs() < 1e-9);
        assert!((p[1] - 1.05).abs() < 1e-9);
        let (u, v) = k.project(p).unwrap();
        assert!((u - 60.5).abs() < 1e-9 && (v - 40.5).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let kpr = kp(rng.gen_range(0..80), rng.gen_range(0..24));
            let (du, dv) = (rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
            let z = rng.gen_range(1.0..60.0);
            let p = decode_location3d(&kpr, du, dv, encode_depth(z).unwrap(), &k).unwrap();
            let (u, v) = k.project(p).unwrap();
            assert!((u - (kpr.u() + du)).abs() < 1e-9);
            assert!((v - (kpr.v() + dv)).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_codec() {
        let t = DimensionTemplate::new(1.5, 1.6, 3.8).unwrap();
        assert_eq!(decode_dimensions(&t, 0.0, 0.0, 0.0), (1.5, 1.6, 3.8));
        let (h, _, _) = decode_dimensions(&t, 2.0_f64.ln(), 0.0, 0.0);
        assert!((h - 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (dh, dw, dl) =
                (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (h, w, l) = decode_dimensions(&t, dh, dw, dl);
            let (eh, ew, el) = encode_dimensions(&t, h, w, l);
            assert!((eh - dh).abs() < 1e-12 && (ew - dw).abs() < 1e-12 && (el - dl).abs() < 1e-12);
        }
    }

    #[test]
    fn yaw_decode() {
        assert_eq!(decode_yaw(1.0, 0.0, 0.0, 5.0).unwrap(), 0.0);
        let th = decode_yaw(FRAC_PI_4.cos(), FRAC_PI_4.sin(), 1.0, 1.0).unwrap();
        assert!((th - FRAC_PI_2).abs() < 1e-12);
        assert!(decode_yaw(0.0, 0.0, 1.0, 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(-10.0..10.0);
            let (x, z) = (rng.gen_range(-30.0..30.0), rng.gen_range(0.1..60.0));
            let th = decode_yaw(a.cos(), a.sin(), x, z).unwrap();
            assert!(th > -PI && th <= PI, "wrap failed: {th}");
            // invariant under positive rescaling of the pair
            let s = rng.gen_range(0.1..5.0);
            let th2 = decode_yaw(s * a.cos(), s * a.sin(), x, z).unwrap();
            assert!((th - th2).abs() < 1e-12);
        }
    }

    #[test]
    fn yaw_and_viewing_angle_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let theta = rng.gen_range(-PI..PI);
            let (x, z) = (rng.gen_range(-20.0..20.0), rng.gen_range(1.0..50.0));
            let a = viewing_angle(theta, x, z);
            let th = decode_yaw(a.cos(), a.sin(), x, z).unwrap();
            assert!((wrap_angle(th - theta)).abs() < 1e-9);
        }
    }

    #[test]
    fn corners2d_order_and_degenerate() {
        let b = Box2D { u: 10.0, v: 20.0, w: 4.0, h: 6.0 };
        assert_eq!(
            corners2d(&b),
            [[8.0, 17.0], [12.0, 17.0], [8.0, 23.0], [12.0, 23.0]]
        );
        let z = Box2D { u: 1.0, v: 2.0, w: 0.0, h: 0.0 };
        assert!(corners2d(&z).iter().all(|c| *c == [1.0, 2.0]));
    }

    #[test]
    fn corners3d_unit_cube_and_quarter_turn() {
        let b = Box3D { x: 0.0, y: 0.0, z: 0.0, h: 2.0, w: 2.0, l: 2.0, theta: 0.0 };
        let cs = corners3d(&b);
        for c in cs {
            assert!(c.iter().all(|v| v.abs() == 1.0));
        }
        // all 8 sign combinations occur exactly once
        let mut seen: Vec<_> = cs.iter().map(|c| (c[0] > 0.0, c[1] > 0.0, c[2] > 0.0)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);

        // quarter turn maps the +x half-width offset to -z
        let r = Box3D { theta: FRAC_PI_2, ..b };
        let c0 = corners3d(&r)[0]; // signs (+,+,+)
        assert!((c0[0] - 1.0).abs() < 1e-12); // from sz * L/2 through sin
        assert!((c0[2] + 1.0).abs() < 1e-12); // from sx * W/2 through -sin
    }

    #[test]
    fn corners3d_centroid_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let b = Box3D {
                x: rng.gen_range(-10.0..10.0),
                y: rng.gen_range(-2.0..2.0),
                z: rng.gen_range(3.0..50.0),
                h: rng.gen_range(0.5..3.0),
                w: rng.gen_range(0.5..3.0),
                l: rng.gen_range(0.5..6.0),
                theta: rng.gen_range(-PI..PI),
            };
            let cs = corners3d(&b);
            for axis in 0..3 {
                let mean = cs.iter().map(|c| c[axis]).sum::<f64>() / 8.0;
                let center = [b.x, b.y, b.z][axis];
                assert!((mean - center).abs() < 1e-12);
            }
            // pairwise distances do not depend on theta
            let b2 = Box3D { theta: rng.gen_range(-PI..PI), ..b };
            let cs2 = corners3d(&b2);
            for i in 0..8 {
                for j in (i + 1)..8 {
                    let d1: f64 = (0..3).map(|a| (cs[i][a] - cs[j][a]).powi(2)).sum::<f64>().sqrt();
                    let d2: f64 = (0..3).map(|a| (cs2[i][a] - cs2[j][a]).powi(2)).sum::<f64>().sqrt();
                    assert!((d1 - d2).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn remake_label_2d_symmetry_scaling_and_tightness() {
        let k = CameraIntrinsics::new(700.0, 700.0, 608.0, 180.0).unwrap();
        let b = Box3D { x: 0.0, y: 0.0, z: 20.0, h: 1.5, w: 1.6, l: 3.9, theta: 0.0 };
        let r = remake_label_2d(&b, &k).unwrap();
        assert!((r.u - 608.0).abs() < 1e-9 && (r.v - 180.0).abs() < 1e-9);

        // fronto-parallel face: doubling depth halves the remade size
        let thin = Box3D { l: 1e-9, ..b };
        let near = remake_label_2d(&thin, &k).unwrap();
        let far = remake_label_2d(&Box3D { z: 40.0, ..thin }, &k).unwrap();
        assert!((near.w / far.w - 2.0).abs() < 1e-6);
        assert!((near.h / far.h - 2.0).abs() < 1e-6);

        // tightness: every projected corner inside with zero margin
        let (l, t, rr, bo) = r.ltrb();
        let mut touched = [false; 4];
        for c in corners3d(&b) {
            let (u, v) = k.project(c).unwrap();
            assert!(u >= l - 1e-12 && u <= rr + 1e-12 && v >= t - 1e-12 && v <= bo + 1e-12);
            if (u - l).abs() < 1e-9 {
                touched[0] = true;
            }
            if (u - rr).abs() < 1e-9 {
                touched[1] = true;
            }
            if (v - t).abs() < 1e-9 {
                touched[2] = true;
            }
            if (v - bo).abs() < 1e-9 {
                touched[3] = true;
            }
        }
        assert!(touched.iter().all(|&t| t), "box is not tight: {touched:?}");

        // corner behind the camera
        let bad = Box3D { z: 0.5, ..b };
        assert!(remake_label_2d(&bad, &k).is_err());
    }
}
