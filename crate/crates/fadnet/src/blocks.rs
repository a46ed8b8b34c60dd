//! Network building blocks: head block, convolutional GRU cell, depth hint
//! module, and the plain-convolution backbone stand-in with its upsampler.

use crate::error::Result;
use crate::model::UpsampleMode;
use crate::params::{GN_EPS, GN_GROUPS};
use crate::tensor::{Graph, TensorId};

/// Weight and bias of one convolution, bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// conv3x3 -> GN -> ReLU -> conv1x1 head.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub conv3: ConvParams,
    pub gn_gamma: TensorId,
    pub gn_beta: TensorId,
    pub conv1: ConvParams,
}

/// Gate convolutions of the convolutional GRU cell. Each is 3x3, stride 1,
/// with 64 output channels over the concatenation [x; h].
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub update: ConvParams,
    pub reset: ConvParams,
    pub candidate: ConvParams,
}

/// 1x1 squeeze over channels plus 1x1 collapse over width.
#[derive(Debug, Clone, Copy)]
pub struct HintParams {
    pub squeeze: ConvParams,
    pub column: ConvParams,
}

/// Strided convolution stack (stride 32) plus the x8 upsampler (stride 4).
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub convs: Vec<ConvParams>,
    pub upsampler: Vec<ConvParams>,
    pub upsample_mode: UpsampleMode,
}

/// Head forward pass; spatial size is preserved (3x3 at pad 1, then 1x1).
pub fn head_forward(g: &mut Graph, head: &HeadParams, feature: TensorId) -> Result<TensorId> {
    let c = g.conv2d(feature, head.conv3.weight, head.conv3.bias, 1, 1)?;
    let n = g.group_norm(c, GN_GROUPS, head.gn_gamma, head.gn_beta, GN_EPS)?;
    let r = g.relu(n);
    g.conv2d(r, head.conv1.weight, head.conv1.bias, 1, 0)
}

/// One recurrent step:
/// z = sigmoid(conv([x; h])), r = sigmoid(conv([x; h])),
/// hc = tanh(conv([x; r .* h])), h' = (1 - z) .* h + z .* hc.
pub fn convgru_step(g: &mut Graph, cell: &GruParams, x: TensorId, h_prev: TensorId) -> Result<TensorId> {
    let xh = g.concat_channels(x, h_prev)?;
    let z_pre = g.conv2d(xh, cell.update.weight, cell.update.bias, 1, 1)?;
    let z = g.sigmoid(z_pre);
    let r_pre = g.conv2d(xh, cell.reset.weight, cell.reset.bias, 1, 1)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let xrh = g.concat_channels(x, rh)?;
    let hc_pre = g.conv2d(xrh, cell.candidate.weight, cell.candidate.bias, 1, 1)?;
    let hc = g.tanh(hc_pre);
    let keep = g.affine(z, -1.0, 1.0); // 1 - z
    let a = g.mul(keep, h_prev)?;
    let b = g.mul(z, hc)?;
    g.add(a, b)
}

/// Depth hint forward: squeeze channels to one, move width onto the channel
/// axis, collapse it with a 1x1 convolution, and replicate the resulting
/// H/32 vector (meters) into a 1 x H/4 x W/4 map (each element fills an
/// 8-row band).
pub fn depth_hint_forward(
    g: &mut Graph,
    hint: &HintParams,
    deep_feature: TensorId,
) -> Result<(TensorId, TensorId)> {
    let s = g.shape(deep_feature).to_vec();
    let (h32, _w32) = (s[1], s[2]);
    let squeezed = g.conv2d(deep_feature, hint.squeeze.weight, hint.squeeze.bias, 1, 0)?;
    let transposed = g.transpose_cw(squeezed)?; // [W/32, H/32, 1]
    let collapsed = g.conv2d(transposed, hint.column.weight, hint.column.bias, 1, 0)?; // [1, H/32, 1]
    let vector = g.reshape(collapsed, vec![h32])?;
    let map = g.replicate_rows(vector, 8, 8 * h32, 8 * s[2])?;
    Ok((vector, map))
}

/// Backbone stand-in: five stride-2 4x4 convolutions with ReLU down to
/// stride 32, then three x2 upsampling stages back to stride 4.
pub fn backbone_forward(
    g: &mut Graph,
    bb: &BackboneParams,
    image: TensorId,
) -> Result<(TensorId, TensorId)> {
    let mut x = image;
    for conv in &bb.convs {
        let c = g.conv2d(x, conv.weight, conv.bias, 2, 1)?;
        x = g.relu(c);
    }
    let deep = x;
    let mut f = deep;
    for conv in &bb.upsampler {
        let c = match bb.upsample_mode {
            UpsampleMode::Bilinear => {
                let up = g.upsample_bilinear(f, 2)?;
                g.conv2d(up, conv.weight, conv.bias, 1, 1)?
            }
            UpsampleMode::Transposed => g.conv_transpose2d(f, conv.weight, conv.bias, 2, 1)?,
        };
        f = g.relu(c);
    }
    Ok((deep, f))
}
