//! Central-difference verification of analytic gradients.

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
    /// Cap on coordinates checked per input tensor (deterministic subsample);
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { eps: 1e-5, tol: 1e-5, max_coords_per_input: None, seed: 0 }
    }
}

/// A coordinate where the function could not be evaluated.
#[derive(Debug, Clone)]
pub struct CoordError {
    pub input: usize,
    pub coord: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub eval_errors: Vec<CoordError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.eval_errors.is_empty() && self.max_rel_err <= self.tol
    }
}

/// Relative error with a floor that keeps finite-difference noise on
/// near-zero gradients from dominating the report.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare the analytic gradient of `f` against central differences over the
/// coordinates of `inputs`. `f` must build a scalar from leaves it is handed
/// in the same order.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::param("gradcheck", format!("eps {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::domain("gradcheck", format!("input {i} contains non-finite values")));
        }
    }

    // Analytic pass.
    let mut graph = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| graph.leaf_from(t.shape().to_vec(), t.values().to_vec(), true))
        .collect();
    let root = f(&mut graph, &ids)?;
    if graph.value(root).len() != 1 {
        return Err(Error::contract("gradcheck", "f must produce a scalar"));
    }
    graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| graph.grad(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> std::result::Result<f64, String> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .map(|t| g.leaf_from(t.shape().to_vec(), t.values().to_vec(), false))
            .collect();
        let root = f(&mut g, &ids).map_err(|e| e.to_string())?;
        let v = g.scalar_value(root);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite value {v}"))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        tol: cfg.tol,
        worst: None,
        eval_errors: Vec::new(),
    };

    for (i, tensor) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if n > k => (0..n).choose_multiple(&mut rng, k),
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = tensor.values()[c];
            work[i].values_mut()[c] = x0 + cfg.eps;
            let plus = eval(&work);
            work[i].values_mut()[c] = x0 - cfg.eps;
            let minus = eval(&work);
            work[i].values_mut()[c] = x0;

            match (plus, minus) {
                (Ok(p), Ok(m)) => {
                    let numeric = (p - m) / (2.0 * cfg.eps);
                    let a = analytic[i][c];
                    let e = rel_err(a, numeric);
                    report.coords_checked += 1;
                    if e > report.max_rel_err {
                        report.max_rel_err = e;
                        report.worst = Some((i, c, a, numeric));
                    }
                }
                (r1, r2) => {
                    let message = r1.err().or(r2.err()).unwrap_or_default();
                    report.eval_errors.push(CoordError { input: i, coord: c, message });
                }
            }
        }
    }
    Ok(report)
}

/// Gradient checks for every graph primitive on small random shapes.
/// Returns `(name, report)` pairs; used by tests and the CLI sweep.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, GradcheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradcheckConfig::default();
    let mut out = Vec::new();

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape.to_vec(), values).unwrap()
    }
    /// Random values bounded away from zero (for kinked ops).
    fn rand_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), values).unwrap()
    }

    let mut check = |name: &'static str,
                     inputs: Vec<Tensor>,
                     f: Box<dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId>>| {
        let report = gradcheck(|g, ids| f(g, ids), &inputs, &cfg).expect("gradcheck setup");
        out.push((name, report));
    };

    check(
        "conv2d_s1_p1",
        vec![
            rand_tensor(&mut rng, &[2, 6, 7], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
            rand_tensor(&mut rng, &[3], -0.5, 0.5),
        ],
        Box::new(|g, ids| {
            let c = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let t = g.tanh(c);
            Ok(g.sum(t))
        }),
    );
    check(
        "conv2d_s2_p1",
        vec![
            rand_tensor(&mut rng, &[2, 7, 7], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 2, 3, 3], -0.5, 0.5),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
        ],
        Box::new(|g, ids| {
            let c = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            let t = g.tanh(c);
            Ok(g.sum(t))
        }),
    );
    check(
        "conv_transpose2d_s2_k4_p1",
        vec![
            rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 2, 4, 4], -0.5, 0.5),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
        ],
        Box::new(|g, ids| {
            let c = g.conv_transpose2d(ids[0], ids[1], ids[2], 2, 1)?;
            let t = g.tanh(c);
            Ok(g.sum(t))
        }),
    );
    check(
        "upsample_bilinear_x2",
        vec![rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let u = g.upsample_bilinear(ids[0], 2)?;
            let t = g.tanh(u);
            Ok(g.sum(t))
        }),
    );
    check(
        "group_norm",
        vec![
            rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[4], 0.5, 1.5),
            rand_tensor(&mut rng, &[4], -0.5, 0.5),
        ],
        Box::new(|g, ids| {
            let n = g.group_norm(ids[0], 2, ids[1], ids[2], 1e-5)?;
            let t = g.tanh(n);
            Ok(g.sum(t))
        }),
    );
    check(
        "relu",
        vec![rand_nonzero(&mut rng, &[3, 4, 4])],
        Box::new(|g, ids| {
            let r = g.relu(ids[0]);
            let m = g.mul(r, ids[0])?;
            Ok(g.sum(m))
        }),
    );
    check(
        "sigmoid",
        vec![rand_tensor(&mut rng, &[10], -3.0, 3.0)],
        Box::new(|g, ids| {
            let s = g.sigmoid(ids[0]);
            Ok(g.sum(s))
        }),
    );
    check(
        "tanh",
        vec![rand_tensor(&mut rng, &[10], -3.0, 3.0)],
        Box::new(|g, ids| {
            let t = g.tanh(ids[0]);
            Ok(g.sum(t))
        }),
    );
    check(
        "exp",
        vec![rand_tensor(&mut rng, &[8], -2.0, 2.0)],
        Box::new(|g, ids| {
            let e = g.exp(ids[0]);
            Ok(g.sum(e))
        }),
    );
    check(
        "ln",
        vec![rand_tensor(&mut rng, &[8], 0.3, 3.0)],
        Box::new(|g, ids| {
            let l = g.ln(ids[0])?;
            Ok(g.sum(l))
        }),
    );
    check(
        "sin_cos",
        vec![rand_tensor(&mut rng, &[8], -3.0, 3.0)],
        Box::new(|g, ids| {
            let s = g.sin(ids[0]);
            let c = g.cos(ids[0]);
            let m = g.mul(s, c)?;
            Ok(g.sum(m))
        }),
    );
    check(
        "abs",
        vec![rand_nonzero(&mut rng, &[9])],
        Box::new(|g, ids| {
            let a = g.abs(ids[0]);
            Ok(g.sum(a))
        }),
    );
    check(
        "pow_square",
        vec![rand_tensor(&mut rng, &[8], -2.0, 2.0)],
        Box::new(|g, ids| {
            let p = g.pow_scalar(ids[0], 2.0)?;
            Ok(g.sum(p))
        }),
    );
    check(
        "pow_fractional",
        vec![rand_tensor(&mut rng, &[8], 0.2, 4.0)],
        Box::new(|g, ids| {
            let p = g.pow_scalar(ids[0], 0.4)?;
            Ok(g.sum(p))
        }),
    );
    check(
        "affine_clamp",
        vec![rand_nonzero(&mut rng, &[9])],
        Box::new(|g, ids| {
            let a = g.affine(ids[0], 1.7, -0.3);
            let c = g.clamp_min(a, -5.0);
            Ok(g.sum(c))
        }),
    );
    check(
        "add_sub_mul",
        vec![rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0), rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0)],
        Box::new(|g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let d = g.sub(ids[0], ids[1])?;
            let m = g.mul(s, d)?;
            Ok(g.sum(m))
        }),
    );
    check(
        "div",
        vec![rand_tensor(&mut rng, &[8], -1.0, 1.0), rand_tensor(&mut rng, &[8], 0.5, 1.5)],
        Box::new(|g, ids| {
            let q = g.div(ids[0], ids[1])?;
            Ok(g.sum(q))
        }),
    );
    check(
        "atan2",
        vec![rand_tensor(&mut rng, &[8], 0.3, 1.5), rand_tensor(&mut rng, &[8], 0.3, 1.5)],
        Box::new(|g, ids| {
            let a = g.atan2(ids[0], ids[1])?;
            Ok(g.sum(a))
        }),
    );
    check(
        "concat_slice",
        vec![rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0), rand_tensor(&mut rng, &[1, 3, 3], -1.0, 1.0)],
        Box::new(|g, ids| {
            let c = g.concat_channels(ids[0], ids[1])?;
            let t = g.tanh(c);
            let s = g.slice_channels(t, 1, 2)?;
            Ok(g.sum(s))
        }),
    );
    check(
        "gather_scalar",
        vec![rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let t = g.tanh(ids[0]);
            let a = g.gather_scalar(t, 1, 2, 3)?;
            let b = g.gather_scalar(t, 0, 0, 0)?;
            g.add(a, b)
        }),
    );
    check(
        "replicate_rows",
        vec![rand_tensor(&mut rng, &[3], -1.0, 1.0), rand_tensor(&mut rng, &[1, 6, 4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let r = g.replicate_rows(ids[0], 2, 6, 4)?;
            let m = g.mul(r, ids[1])?;
            Ok(g.sum(m))
        }),
    );
    check(
        "transpose_reshape",
        vec![rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        Box::new(|g, ids| {
            let t = g.transpose_cw(ids[0])?;
            let r = g.reshape(t, vec![24])?;
            let q = g.mul(r, r)?;
            Ok(g.sum(q))
        }),
    );

    out
}
