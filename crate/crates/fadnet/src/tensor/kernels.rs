//! Raw compute kernels behind the graph ops.
//!
//! Convolution-family kernels split their work over disjoint channel chunks
//! (see [`crate::par`]); everything else is cheap enough to stay sequential.
//! All backward kernels accumulate (`+=`) into the supplied buffers.

use crate::error::{Error, Result};
use crate::par;

/// Validated geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn conv2d(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [c_in, h_in, w_in] = three(input_shape, "conv2d", "input")?;
        if weight_shape.len() != 4 {
            return Err(Error::dim("conv2d", format!("weight must be rank 4, got {weight_shape:?}")));
        }
        let (c_out, wc_in, kh, kw) =
            (weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]);
        if kh != kw {
            return Err(Error::param("conv2d", format!("only square kernels supported, got {kh}x{kw}")));
        }
        if wc_in != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::param("conv2d", "stride must be >= 1"));
        }
        let k = kh;
        let h_num = (h_in + 2 * pad).checked_sub(k).ok_or_else(|| {
            Error::geometry("conv2d", format!("kernel {k} exceeds padded height {}", h_in + 2 * pad))
        })?;
        let w_num = (w_in + 2 * pad).checked_sub(k).ok_or_else(|| {
            Error::geometry("conv2d", format!("kernel {k} exceeds padded width {}", w_in + 2 * pad))
        })?;
        if h_num % stride != 0 || w_num % stride != 0 {
            return Err(Error::geometry(
                "conv2d",
                format!(
                    "non-integer output extent for input {h_in}x{w_in}, kernel {k}, stride {stride}, pad {pad}"
                ),
            ));
        }
        Ok(ConvDims {
            c_in,
            h_in,
            w_in,
            c_out,
            k,
            stride,
            pad,
            h_out: h_num / stride + 1,
            w_out: w_num / stride + 1,
        })
    }

    /// Geometry for a transposed convolution with weight layout
    /// `[c_in, c_out, k, k]`. `h_out = (h_in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [c_in, h_in, w_in] = three(input_shape, "conv_transpose2d", "input")?;
        if weight_shape.len() != 4 {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("weight must be rank 4, got {weight_shape:?}"),
            ));
        }
        let (wc_in, c_out, kh, kw) =
            (weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]);
        if kh != kw {
            return Err(Error::param(
                "conv_transpose2d",
                format!("only square kernels supported, got {kh}x{kw}"),
            ));
        }
        if wc_in != c_in {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::param("conv_transpose2d", "stride must be >= 1"));
        }
        let h_out = ((h_in - 1) * stride + kh).checked_sub(2 * pad);
        let w_out = ((w_in - 1) * stride + kw).checked_sub(2 * pad);
        match (h_out, w_out) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(ConvDims {
                c_in,
                h_in,
                w_in,
                c_out,
                k: kh,
                stride,
                pad,
                h_out: h,
                w_out: w,
            }),
            _ => Err(Error::geometry(
                "conv_transpose2d",
                format!("padding {pad} swallows the whole output for input {h_in}x{w_in}"),
            )),
        }
    }
}

fn three(shape: &[usize], op: &'static str, what: &str) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(Error::dim(op, format!("{what} must be rank 3 [C,H,W], got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// Valid output range `[lo, hi)` such that `o * stride + offset` stays inside
/// `[0, extent)`.
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        (((-offset) as usize) + stride - 1) / stride
    };
    let last = in_extent as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

// ── conv2d ──────────────────────────────────────────────────────────────

pub fn conv2d_forward(d: &ConvDims, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let kk = d.k * d.k;
    par::for_each_chunk_mut(out, plane_out, |co, out_plane| {
        out_plane.fill(bias[co]);
        for ci in 0..d.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            let w_base = (co * d.c_in + ci) * kk;
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (oy_lo, oy_hi) = valid_range(d.h_out, d.h_in, d.stride, dy);
                for kx in 0..d.k {
                    let w = weight[w_base + ky * d.k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - d.pad as isize;
                    let (ox_lo, ox_hi) = valid_range(d.w_out, d.w_in, d.stride, dx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * d.stride) as isize + dy;
                        let in_row = &in_plane[iy as usize * d.w_in..(iy as usize + 1) * d.w_in];
                        let out_row = &mut out_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        if d.stride == 1 {
                            let ix0 = (ox_lo as isize + dx) as usize;
                            let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (o, i) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += w * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * d.stride) as isize + dx;
                                out_row[ox] += w * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_grad_bias(d: &ConvDims, grad_out: &[f64], grad_bias: &mut [f64]) {
    let plane = d.h_out * d.w_out;
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
    }
}

pub fn conv2d_grad_weight(d: &ConvDims, input: &[f64], grad_out: &[f64], grad_weight: &mut [f64]) {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let kk = d.k * d.k;
    par::for_each_chunk_mut(grad_weight, d.c_in * kk, |co, gw_chunk| {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..d.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (oy_lo, oy_hi) = valid_range(d.h_out, d.h_in, d.stride, dy);
                for kx in 0..d.k {
                    let dx = kx as isize - d.pad as isize;
                    let (ox_lo, ox_hi) = valid_range(d.w_out, d.w_in, d.stride, dx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * d.stride) as isize + dy) as usize;
                        let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        let in_row = &in_plane[iy * d.w_in..(iy + 1) * d.w_in];
                        if d.stride == 1 {
                            let ix0 = (ox_lo as isize + dx) as usize;
                            let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (g, i) in go_row[ox_lo..ox_hi].iter().zip(src) {
                                acc += g * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * d.stride) as isize + dx) as usize;
                                acc += go_row[ox] * in_row[ix];
                            }
                        }
                    }
                    gw_chunk[ci * kk + ky * d.k + kx] += acc;
                }
            }
        }
    });
}

pub fn conv2d_grad_input(d: &ConvDims, weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let kk = d.k * d.k;
    par::for_each_chunk_mut(grad_in, plane_in, |ci, gi_plane| {
        for co in 0..d.c_out {
            let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
            let w_base = (co * d.c_in + ci) * kk;
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (oy_lo, oy_hi) = valid_range(d.h_out, d.h_in, d.stride, dy);
                for kx in 0..d.k {
                    let w = weight[w_base + ky * d.k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - d.pad as isize;
                    let (ox_lo, ox_hi) = valid_range(d.w_out, d.w_in, d.stride, dx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * d.stride) as isize + dy) as usize;
                        let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        let gi_row = &mut gi_plane[iy * d.w_in..(iy + 1) * d.w_in];
                        if d.stride == 1 {
                            let ix0 = (ox_lo as isize + dx) as usize;
                            let dst = &mut gi_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (gi, g) in dst.iter_mut().zip(&go_row[ox_lo..ox_hi]) {
                                *gi += w * g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * d.stride) as isize + dx) as usize;
                                gi_row[ix] += w * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

// ── transposed conv ─────────────────────────────────────────────────────

pub fn conv_transpose2d_forward(
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let kk = d.k * d.k;
    par::for_each_chunk_mut(out, plane_out, |co, out_plane| {
        out_plane.fill(bias[co]);
        for ci in 0..d.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            let w_base = (ci * d.c_out + co) * kk;
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (iy_lo, iy_hi) = valid_range(d.h_in, d.h_out, d.stride, dy);
                for kx in 0..d.k {
                    let w = weight[w_base + ky * d.k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - d.pad as isize;
                    let (ix_lo, ix_hi) = valid_range(d.w_in, d.w_out, d.stride, dx);
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * d.stride) as isize + dy) as usize;
                        let in_row = &in_plane[iy * d.w_in..(iy + 1) * d.w_in];
                        let out_row = &mut out_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * d.stride) as isize + dx) as usize;
                            out_row[ox] += w * in_row[ix];
                        }
                    }
                }
            }
        }
    });
}

pub fn conv_transpose2d_grad_bias(d: &ConvDims, grad_out: &[f64], grad_bias: &mut [f64]) {
    let plane = d.h_out * d.w_out;
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
    }
}

pub fn conv_transpose2d_grad_weight(
    d: &ConvDims,
    input: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
) {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let kk = d.k * d.k;
    par::for_each_chunk_mut(grad_weight, d.c_out * kk, |ci, gw_chunk| {
        let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
        for co in 0..d.c_out {
            let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (iy_lo, iy_hi) = valid_range(d.h_in, d.h_out, d.stride, dy);
                for kx in 0..d.k {
                    let dx = kx as isize - d.pad as isize;
                    let (ix_lo, ix_hi) = valid_range(d.w_in, d.w_out, d.stride, dx);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * d.stride) as isize + dy) as usize;
                        let in_row = &in_plane[iy * d.w_in..(iy + 1) * d.w_in];
                        let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * d.stride) as isize + dx) as usize;
                            acc += in_row[ix] * go_row[ox];
                        }
                    }
                    gw_chunk[co * kk + ky * d.k + kx] += acc;
                }
            }
        }
    });
}

pub fn conv_transpose2d_grad_input(
    d: &ConvDims,
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let kk = d.k * d.k;
    par::for_each_chunk_mut(grad_in, plane_in, |ci, gi_plane| {
        for co in 0..d.c_out {
            let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
            let w_base = (ci * d.c_out + co) * kk;
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (iy_lo, iy_hi) = valid_range(d.h_in, d.h_out, d.stride, dy);
                for kx in 0..d.k {
                    let w = weight[w_base + ky * d.k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - d.pad as isize;
                    let (ix_lo, ix_hi) = valid_range(d.w_in, d.w_out, d.stride, dx);
                    for iy in iy_lo..iy_hi {
                        let oy = ((iy * d.stride) as isize + dy) as usize;
                        let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                        let gi_row = &mut gi_plane[iy * d.w_in..(iy + 1) * d.w_in];
                        for ix in ix_lo..ix_hi {
                            let ox = ((ix * d.stride) as isize + dx) as usize;
                            gi_row[ix] += w * go_row[ox];
                        }
                    }
                }
            }
        }
    });
}

// ── bilinear x2 upsampling ──────────────────────────────────────────────

/// Sampling table for one axis of a 2x bilinear resize (half-pixel centers,
/// edges clamped): output index -> (lo index, hi index, hi weight).
fn bilinear2x_axis(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = 0.5 * (o as f64 + 0.5) - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                if i0 + 1 >= n_in {
                    (n_in - 1, n_in - 1, 0.0)
                } else {
                    (i0, i0 + 1, src - i0 as f64)
                }
            }
        })
        .collect()
}

pub fn bilinear2x_forward(h: usize, w: usize, input: &[f64], out: &mut [f64]) {
    let ys = bilinear2x_axis(h);
    let xs = bilinear2x_axis(w);
    let (h2, w2) = (2 * h, 2 * w);
    par::for_each_chunk_mut(out, h2 * w2, |ch, out_plane| {
        let in_plane = &input[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let r0 = &in_plane[y0 * w..y0 * w + w];
            let r1 = &in_plane[y1 * w..y1 * w + w];
            let out_row = &mut out_plane[oy * w2..(oy + 1) * w2];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = r0[x0] + tx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + tx * (r1[x1] - r1[x0]);
                out_row[ox] = top + ty * (bot - top);
            }
        }
    });
}

pub fn bilinear2x_backward(h: usize, w: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let ys = bilinear2x_axis(h);
    let xs = bilinear2x_axis(w);
    let (h2, w2) = (2 * h, 2 * w);
    par::for_each_chunk_mut(grad_in, h * w, |ch, gi_plane| {
        let go_plane = &grad_out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let go_row = &go_plane[oy * w2..(oy + 1) * w2];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = go_row[ox];
                gi_plane[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                gi_plane[y0 * w + x1] += g * (1.0 - ty) * tx;
                gi_plane[y1 * w + x0] += g * ty * (1.0 - tx);
                gi_plane[y1 * w + x1] += g * ty * tx;
            }
        }
    });
}

// ── group normalization ─────────────────────────────────────────────────

pub struct GroupNormDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub eps: f64,
}

pub fn group_norm_forward(d: &GroupNormDims, input: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let cpg = d.c / d.groups;
    let plane = d.h * d.w;
    let glen = cpg * plane;
    for g in 0..d.groups {
        let span = &input[g * glen..(g + 1) * glen];
        let mean = span.iter().sum::<f64>() / glen as f64;
        let var = span.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / glen as f64;
        let inv = 1.0 / (var + d.eps).sqrt();
        for ci in 0..cpg {
            let c = g * cpg + ci;
            let (ga, be) = (gamma[c], beta[c]);
            let src = &span[ci * plane..(ci + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for (o, x) in dst.iter_mut().zip(src) {
                *o = ga * (x - mean) * inv + be;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    d: &GroupNormDims,
    input: &[f64],
    gamma: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let cpg = d.c / d.groups;
    let plane = d.h * d.w;
    let glen = cpg * plane;
    let m = glen as f64;
    for g in 0..d.groups {
        let span = &input[g * glen..(g + 1) * glen];
        let gout = &grad_out[g * glen..(g + 1) * glen];
        let mean = span.iter().sum::<f64>() / m;
        let var = span.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + d.eps).sqrt();

        // q = grad_out * gamma (upstream into the normalized value)
        let mut mean_q = 0.0;
        let mut mean_qx = 0.0;
        for ci in 0..cpg {
            let ga = gamma[g * cpg + ci];
            for i in 0..plane {
                let idx = ci * plane + i;
                let q = gout[idx] * ga;
                let xh = (span[idx] - mean) * inv;
                mean_q += q;
                mean_qx += q * xh;
            }
        }
        mean_q /= m;
        mean_qx /= m;

        for ci in 0..cpg {
            let c = g * cpg + ci;
            let ga = gamma[c];
            let mut acc_gamma = 0.0;
            let mut acc_beta = 0.0;
            for i in 0..plane {
                let idx = ci * plane + i;
                let xh = (span[idx] - mean) * inv;
                let go = gout[idx];
                acc_gamma += go * xh;
                acc_beta += go;
                grad_in[g * glen + idx] += inv * (go * ga - mean_q - xh * mean_qx);
            }
            grad_gamma[c] += acc_gamma;
            grad_beta[c] += acc_beta;
        }
    }
}
