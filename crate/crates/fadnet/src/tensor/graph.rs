//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order (an operation may only reference
//! earlier ids), so backward is a single reverse sweep. Intermediate
//! gradients are per-call temporaries; leaf gradients persist on the graph
//! and accumulate across `backward` calls until [`Graph::zero_grads`].

use super::kernels::{self, ConvDims, GroupNormDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: TensorId, weight: TensorId, bias: TensorId, dims: ConvDims },
    ConvTranspose2d { input: TensorId, weight: TensorId, bias: TensorId, dims: ConvDims },
    Bilinear2x { input: TensorId },
    GroupNorm { input: TensorId, gamma: TensorId, beta: TensorId, groups: usize, eps: f64 },
    Relu { input: TensorId },
    Sigmoid { input: TensorId },
    Tanh { input: TensorId },
    Exp { input: TensorId },
    Ln { input: TensorId },
    Abs { input: TensorId },
    Sin { input: TensorId },
    Cos { input: TensorId },
    PowScalar { input: TensorId, exponent: f64 },
    Affine { input: TensorId, scale: f64 },
    ClampMin { input: TensorId, min: f64 },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Atan2 { y: TensorId, x: TensorId },
    ConcatChannels { a: TensorId, b: TensorId },
    SliceChannels { input: TensorId, start: usize },
    Sum { input: TensorId },
    GatherScalar { input: TensorId, flat: usize },
    ReplicateRows { input: TensorId, band: usize, w_out: usize },
    TransposeCw { input: TensorId },
    Reshape { input: TensorId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
}

/// Reverse-mode tape over dense f64 tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { op, shape, values, needs_grad });
        self.leaf_grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn leaf_from(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, shape.into(), values, requires_grad)
    }

    /// Constant scalar leaf (never differentiated).
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(Op::Leaf, vec![1], vec![value], false)
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.node(id).values[0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    /// Accumulated gradient of a leaf (after at least one backward call).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.leaf_grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::from_vec(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node is valid")
    }

    // ── structured ops ──────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let dims = ConvDims::conv2d(self.shape(input), self.shape(weight), stride, pad)?;
        let bshape = self.shape(bias);
        if bshape != [dims.c_out] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {bshape:?} does not match {} output channels", dims.c_out),
            ));
        }
        let mut out = vec![0.0; dims.c_out * dims.h_out * dims.w_out];
        kernels::conv2d_forward(&dims, self.value(input), self.value(weight), self.value(bias), &mut out);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d { input, weight, bias, dims },
            vec![dims.c_out, dims.h_out, dims.w_out],
            out,
            needs,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let dims = ConvDims::conv_transpose2d(self.shape(input), self.shape(weight), stride, pad)?;
        let bshape = self.shape(bias);
        if bshape != [dims.c_out] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("bias shape {bshape:?} does not match {} output channels", dims.c_out),
            ));
        }
        let mut out = vec![0.0; dims.c_out * dims.h_out * dims.w_out];
        kernels::conv_transpose2d_forward(
            &dims,
            self.value(input),
            self.value(weight),
            self.value(bias),
            &mut out,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::ConvTranspose2d { input, weight, bias, dims },
            vec![dims.c_out, dims.h_out, dims.w_out],
            out,
            needs,
        ))
    }

    /// Fixed bilinear upsampling by a factor of 2, 4 or 8.
    pub fn upsample_bilinear(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(Error::param("upsample", format!("factor must be 2, 4 or 8, got {factor}")));
        }
        let mut id = input;
        for _ in 0..factor.trailing_zeros() {
            id = self.bilinear2x(id)?;
        }
        Ok(id)
    }

    fn bilinear2x(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 3 {
            return Err(Error::dim("upsample", format!("input must be rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        kernels::bilinear2x_forward(h, w, self.value(input), &mut out);
        let needs = self.needs(input);
        Ok(self.push(Op::Bilinear2x { input }, vec![c, 2 * h, 2 * w], out, needs))
    }

    pub fn group_norm(
        &mut self,
        input: TensorId,
        groups: usize,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 3 {
            return Err(Error::dim("group_norm", format!("input must be rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::param(
                "group_norm",
                format!("{c} channels not divisible by {groups} groups"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::param("group_norm", format!("eps must be positive, got {eps}")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", "gamma/beta must have one entry per channel"));
        }
        let d = GroupNormDims { c, h, w, groups, eps };
        let mut out = vec![0.0; c * h * w];
        kernels::group_norm_forward(&d, self.value(input), self.value(gamma), self.value(beta), &mut out);
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::GroupNorm { input, gamma, beta, groups, eps }, vec![c, h, w], out, needs))
    }

    // ── pointwise ───────────────────────────────────────────────────────

    fn unary(&mut self, input: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let values = self.node(input).values.iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(op, shape, values, needs)
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Relu { input }, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Sigmoid { input }, sigmoid)
    }

    pub fn tanh(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Tanh { input }, f64::tanh)
    }

    pub fn exp(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Exp { input }, f64::exp)
    }

    pub fn sin(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Sin { input }, f64::sin)
    }

    pub fn cos(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Cos { input }, f64::cos)
    }

    pub fn abs(&mut self, input: TensorId) -> TensorId {
        self.unary(input, Op::Abs { input }, f64::abs)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: TensorId, scale: f64, shift: f64) -> TensorId {
        self.unary(input, Op::Affine { input, scale }, |x| scale * x + shift)
    }

    pub fn neg(&mut self, input: TensorId) -> TensorId {
        self.affine(input, -1.0, 0.0)
    }

    pub fn clamp_min(&mut self, input: TensorId, min: f64) -> TensorId {
        self.unary(input, Op::ClampMin { input, min }, |x| x.max(min))
    }

    /// Natural logarithm; the whole payload must be strictly positive.
    pub fn ln(&mut self, input: TensorId) -> Result<TensorId> {
        if let Some(bad) = self.node(input).values.iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("ln", format!("non-positive input {bad}")));
        }
        Ok(self.unary(input, Op::Ln { input }, f64::ln))
    }

    /// Elementwise `x^p`; requires non-negative inputs for fractional `p`.
    pub fn pow_scalar(&mut self, input: TensorId, exponent: f64) -> Result<TensorId> {
        if exponent.fract() != 0.0 {
            if let Some(bad) = self.node(input).values.iter().find(|v| **v < 0.0) {
                return Err(Error::domain(
                    "pow",
                    format!("negative input {bad} with fractional exponent {exponent}"),
                ));
            }
        }
        Ok(self.unary(input, Op::PowScalar { input, exponent }, |x| x.powf(exponent)))
    }

    // ── binary elementwise ──────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let values = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, shape, values, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.node(b).values.iter().any(|v| *v == 0.0) {
            return Err(Error::domain("div", "zero divisor"));
        }
        self.binary("div", a, b, Op::Div { a, b }, |x, y| x / y)
    }

    pub fn atan2(&mut self, y: TensorId, x: TensorId) -> Result<TensorId> {
        self.binary("atan2", y, x, Op::Atan2 { y, x }, f64::atan2)
    }

    // ── layout ──────────────────────────────────────────────────────────

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::dim(
                "concat_channels",
                format!("spatial mismatch: {sa:?} vs {sb:?}"),
            ));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut values = Vec::with_capacity(shape.iter().product());
        values.extend_from_slice(&self.node(a).values);
        values.extend_from_slice(&self.node(b).values);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatChannels { a, b }, shape, values, needs))
    }

    pub fn slice_channels(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 3 || start + len > s[0] {
            return Err(Error::dim(
                "slice_channels",
                format!("channels [{start}, {}) out of {s:?}", start + len),
            ));
        }
        let plane = s[1] * s[2];
        let values = self.node(input).values[start * plane..(start + len) * plane].to_vec();
        let shape = vec![len, s[1], s[2]];
        let needs = self.needs(input);
        Ok(self.push(Op::SliceChannels { input, start }, shape, values, needs))
    }

    pub fn reshape(&mut self, input: TensorId, shape: impl Into<Vec<usize>>) -> Result<TensorId> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.node(input).values.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let values = self.node(input).values.clone();
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape { input }, shape, values, needs))
    }

    /// `[C,H,W] -> [W,H,C]` permutation (width becomes the channel axis).
    pub fn transpose_cw(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 3 {
            return Err(Error::dim("transpose_cw", format!("input must be rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = &self.node(input).values;
        let mut values = vec![0.0; c * h * w];
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    values[(ix * h + iy) * c + ic] = src[(ic * h + iy) * w + ix];
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(Op::TransposeCw { input }, vec![w, h, c], values, needs))
    }

    /// Replicate a length-n vector into `[1, h_out, w_out]` where rows
    /// `band*i .. band*(i+1)` all take value `v[i]`.
    pub fn replicate_rows(
        &mut self,
        input: TensorId,
        band: usize,
        h_out: usize,
        w_out: usize,
    ) -> Result<TensorId> {
        let s = self.shape(input);
        let n = self.node(input).values.len();
        if s.len() != 1 || band == 0 || n * band != h_out {
            return Err(Error::dim(
                "replicate_rows",
                format!("vector {s:?} with band {band} cannot fill {h_out} rows"),
            ));
        }
        let src = &self.node(input).values;
        let mut values = vec![0.0; h_out * w_out];
        for (i, &v) in src.iter().enumerate() {
            values[i * band * w_out..(i + 1) * band * w_out].fill(v);
        }
        let needs = self.needs(input);
        Ok(self.push(Op::ReplicateRows { input, band, w_out }, vec![1, h_out, w_out], values, needs))
    }

    // ── reductions & indexing ───────────────────────────────────────────

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total: f64 = self.node(input).values.iter().sum();
        let needs = self.needs(input);
        self.push(Op::Sum { input }, vec![1], vec![total], needs)
    }

    /// Pick the scalar at `(c, y, x)` from a rank-3 tensor.
    pub fn gather_scalar(&mut self, input: TensorId, c: usize, y: usize, x: usize) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 3 || c >= s[0] || y >= s[1] || x >= s[2] {
            return Err(Error::dim(
                "gather_scalar",
                format!("index ({c},{y},{x}) out of bounds for {s:?}"),
            ));
        }
        let flat = (c * s[1] + y) * s[2] + x;
        let v = self.node(input).values[flat];
        let needs = self.needs(input);
        Ok(self.push(Op::GatherScalar { input, flat }, vec![1], vec![v], needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.node(root).values.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut temp: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        temp[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                temp[i] = None;
                continue;
            }
            let Some(grad) = temp[i].take() else { continue };
            self.propagate(i, &grad, &mut temp);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = self.leaf_grads[i]
                    .get_or_insert_with(|| vec![0.0; self.nodes[i].values.len()]);
                for (s, g) in slot.iter_mut().zip(&grad) {
                    *s += g;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, grad: &[f64], temp: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        // Fetch a zero-initialized temp slot for an operand.
        macro_rules! slot {
            ($id:expr) => {
                temp[$id.0].get_or_insert_with(|| vec![0.0; self.nodes[$id.0].values.len()])
            };
        }
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, ref dims } => {
                if self.needs(input) {
                    kernels::conv2d_grad_input(dims, &self.nodes[weight.0].values, grad, slot!(input));
                }
                if self.needs(weight) {
                    kernels::conv2d_grad_weight(dims, &self.nodes[input.0].values, grad, slot!(weight));
                }
                if self.needs(bias) {
                    kernels::conv2d_grad_bias(dims, grad, slot!(bias));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, ref dims } => {
                if self.needs(input) {
                    kernels::conv_transpose2d_grad_input(dims, &self.nodes[weight.0].values, grad, slot!(input));
                }
                if self.needs(weight) {
                    kernels::conv_transpose2d_grad_weight(dims, &self.nodes[input.0].values, grad, slot!(weight));
                }
                if self.needs(bias) {
                    kernels::conv_transpose2d_grad_bias(dims, grad, slot!(bias));
                }
            }
            Op::Bilinear2x { input } => {
                if self.needs(input) {
                    let s = &self.nodes[input.0].shape;
                    kernels::bilinear2x_backward(s[1], s[2], grad, slot!(input));
                }
            }
            Op::GroupNorm { input, gamma, beta, groups, eps } => {
                let s = &self.nodes[input.0].shape;
                let d = GroupNormDims { c: s[0], h: s[1], w: s[2], groups, eps };
                // The kernel computes all three grads in one pass; run it into
                // scratch buffers and hand out only what is needed.
                let mut gi = vec![0.0; self.nodes[input.0].values.len()];
                let mut gg = vec![0.0; d.c];
                let mut gb = vec![0.0; d.c];
                kernels::group_norm_backward(
                    &d,
                    &self.nodes[input.0].values,
                    &self.nodes[gamma.0].values,
                    grad,
                    &mut gi,
                    &mut gg,
                    &mut gb,
                );
                if self.needs(input) {
                    add_into(slot!(input), &gi);
                }
                if self.needs(gamma) {
                    add_into(slot!(gamma), &gg);
                }
                if self.needs(beta) {
                    add_into(slot!(beta), &gb);
                }
            }
            Op::Relu { input } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        if x[i] > 0.0 {
                            dst[i] += grad[i];
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(input) {
                    let y = &node.values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh { input } => {
                if self.needs(input) {
                    let y = &node.values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp { input } => {
                if self.needs(input) {
                    let y = &node.values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * y[i];
                    }
                }
            }
            Op::Ln { input } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] / x[i];
                    }
                }
            }
            Op::Abs { input } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        // subgradient 0 at the kink
                        dst[i] += grad[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Sin { input } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * x[i].cos();
                    }
                }
            }
            Op::Cos { input } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] -= grad[i] * x[i].sin();
                    }
                }
            }
            Op::PowScalar { input, exponent } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * exponent * x[i].powf(exponent - 1.0);
                    }
                }
            }
            Op::Affine { input, scale, .. } => {
                if self.needs(input) {
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * scale;
                    }
                }
            }
            Op::ClampMin { input, min } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].values;
                    let dst = slot!(input);
                    for i in 0..grad.len() {
                        if x[i] >= min {
                            dst[i] += grad[i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    add_into(slot!(a), grad);
                }
                if self.needs(b) {
                    add_into(slot!(b), grad);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    add_into(slot!(a), grad);
                }
                if self.needs(b) {
                    let dst = slot!(b);
                    for i in 0..grad.len() {
                        dst[i] -= grad[i];
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0].values;
                    let dst = slot!(a);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * bv[i];
                    }
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].values;
                    let dst = slot!(b);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0].values;
                    let dst = slot!(a);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] / bv[i];
                    }
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    let dst = slot!(b);
                    for i in 0..grad.len() {
                        dst[i] -= grad[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Atan2 { y, x } => {
                let yv = &self.nodes[y.0].values;
                let xv = &self.nodes[x.0].values;
                if self.needs(y) {
                    let dst = slot!(y);
                    for i in 0..grad.len() {
                        dst[i] += grad[i] * xv[i] / (xv[i] * xv[i] + yv[i] * yv[i]);
                    }
                }
                if self.needs(x) {
                    let dst = slot!(x);
                    for i in 0..grad.len() {
                        dst[i] -= grad[i] * yv[i] / (xv[i] * xv[i] + yv[i] * yv[i]);
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let na = self.nodes[a.0].values.len();
                if self.needs(a) {
                    add_into(slot!(a), &grad[..na]);
                }
                if self.needs(b) {
                    add_into(slot!(b), &grad[na..]);
                }
            }
            Op::SliceChannels { input, start, .. } => {
                if self.needs(input) {
                    let s = &self.nodes[input.0].shape;
                    let plane = s[1] * s[2];
                    let dst = slot!(input);
                    for (i, g) in grad.iter().enumerate() {
                        dst[start * plane + i] += g;
                    }
                }
            }
            Op::Sum { input } => {
                if self.needs(input) {
                    let g = grad[0];
                    let dst = slot!(input);
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                }
            }
            Op::GatherScalar { input, flat } => {
                if self.needs(input) {
                    slot!(input)[flat] += grad[0];
                }
            }
            Op::ReplicateRows { input, band, w_out } => {
                if self.needs(input) {
                    let dst = slot!(input);
                    for (i, d) in dst.iter_mut().enumerate() {
                        let span = &grad[i * band * w_out..(i + 1) * band * w_out];
                        *d += span.iter().sum::<f64>();
                    }
                }
            }
            Op::TransposeCw { input } => {
                if self.needs(input) {
                    let s = &self.nodes[input.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let dst = slot!(input);
                    for ic in 0..c {
                        for iy in 0..h {
                            for ix in 0..w {
                                dst[(ic * h + iy) * w + ix] += grad[(ix * h + iy) * c + ic];
                            }
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if self.needs(input) {
                    add_into(slot!(input), grad);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
