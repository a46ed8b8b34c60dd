//! Full network assembly: backbone, recurrent group schedule, heads, and
//! the depth hint path, with the ablation variants used in the experiments.

use crate::blocks::{
    backbone_forward, convgru_step, depth_hint_forward, head_forward, BackboneParams, ConvParams,
    GruParams, HeadParams, HintParams,
};
use crate::error::{Error, Result};
use crate::params::{ParamStore, BACKBONE_STAGES, FEAT_CHANNELS};
use crate::tensor::{Graph, TensorId};

/// Regression output groups in estimation-difficulty order:
/// G1 = (du2d, dv2d, w, h), G2 = (dH, dW, dL, cos a, sin a),
/// G3 = (du3d, dv3d), G4 = (encoded depth).
pub const GROUP_NAMES: [&str; 4] = ["box2d", "dim_angle", "offset3d", "depth"];
pub const GROUP_CHANNELS: [usize; 4] = [4, 5, 2, 1];

/// Total regression channels across the four groups.
pub const TOTAL_REG_CHANNELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Transposed,
}

/// Network variant and input geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    /// Sequential feature association through the convGRU.
    pub enable_fa: bool,
    /// Depth hint augmentation of the depth head.
    pub enable_dh: bool,
    /// Assign groups to timesteps in reverse (G4 first). Requires `enable_fa`.
    pub reversed_order: bool,
    /// Channels of the deepest backbone feature.
    pub backbone_width: usize,
    pub upsample: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            categories: 3,
            height: 384,
            width: 1280,
            enable_fa: true,
            enable_dh: true,
            reversed_order: false,
            backbone_width: 128,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

/// The named ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    FeatureAssociation,
    DepthHint,
    Reversed,
    Full,
}

impl Variant {
    pub fn apply(self, cfg: &mut ModelConfig) {
        let (fa, dh, rev) = match self {
            Variant::Baseline => (false, false, false),
            Variant::FeatureAssociation => (true, false, false),
            Variant::DepthHint => (false, true, false),
            Variant::Reversed => (true, false, true),
            Variant::Full => (true, true, false),
        };
        cfg.enable_fa = fa;
        cfg.enable_dh = dh;
        cfg.reversed_order = rev;
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fa" => Ok(Variant::FeatureAssociation),
            "dh" => Ok(Variant::DepthHint),
            "reversed" => Ok(Variant::Reversed),
            "full" => Ok(Variant::Full),
            other => Err(Error::param("variant", format!("unknown variant `{other}`"))),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 {
            return Err(Error::param("model", "categories must be >= 1"));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::geometry(
                "model",
                format!("input {}x{} must be divisible by 32", self.height, self.width),
            ));
        }
        if self.reversed_order && !self.enable_fa {
            return Err(Error::param("model", "reversed_order requires enable_fa"));
        }
        if self.backbone_width == 0 {
            return Err(Error::param("model", "backbone_width must be >= 1"));
        }
        Ok(())
    }

    /// Heatmap / regression map extent (stride 4).
    pub fn feat_hw(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Deep feature extent (stride 32); also the hint vector length (rows).
    pub fn deep_hw(&self) -> (usize, usize) {
        (self.height / 32, self.width / 32)
    }
}

/// All parameters bound into a graph as leaves, in typed form plus the flat
/// name -> id table used by the optimizer.
pub struct BoundParams {
    pub backbone: BackboneParams,
    pub gru: Option<GruParams>,
    pub keypoint_head: HeadParams,
    pub group_heads: [HeadParams; 4],
    pub hint: Option<HintParams>,
    pub leaf_ids: Vec<(String, TensorId)>,
}

/// Insert every parameter of `store` required by `cfg` into the graph.
/// `trainable(name)` decides whether the leaf requires gradients.
pub fn bind_params(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<BoundParams> {
    struct Binder<'a> {
        store: &'a ParamStore,
        trainable: &'a dyn Fn(&str) -> bool,
        leaf_ids: Vec<(String, TensorId)>,
    }
    impl Binder<'_> {
        fn leaf(&mut self, g: &mut Graph, name: String) -> Result<TensorId> {
            let tensor = self.store.get(&name)?;
            let id = g.leaf_from(tensor.shape().to_vec(), tensor.values().to_vec(), (self.trainable)(&name));
            self.leaf_ids.push((name, id));
            Ok(id)
        }
        fn conv(&mut self, g: &mut Graph, prefix: &str) -> Result<ConvParams> {
            Ok(ConvParams {
                weight: self.leaf(g, format!("{prefix}.weight"))?,
                bias: self.leaf(g, format!("{prefix}.bias"))?,
            })
        }
        fn head(&mut self, g: &mut Graph, name: &str) -> Result<HeadParams> {
            Ok(HeadParams {
                conv3: self.conv(g, &format!("heads.{name}.conv3x3"))?,
                gn_gamma: self.leaf(g, format!("heads.{name}.gn.gamma"))?,
                gn_beta: self.leaf(g, format!("heads.{name}.gn.beta"))?,
                conv1: self.conv(g, &format!("heads.{name}.conv1x1"))?,
            })
        }
    }
    let mut b = Binder { store, trainable, leaf_ids: Vec::new() };

    let mut convs = Vec::new();
    for i in 0..=BACKBONE_STAGES.len() {
        convs.push(b.conv(g, &format!("backbone.conv{i}"))?);
    }
    let mut upsampler = Vec::new();
    for i in 0..3 {
        let prefix = match cfg.upsample {
            UpsampleMode::Bilinear => format!("upsampler.conv{i}"),
            UpsampleMode::Transposed => format!("upsampler.tconv{i}"),
        };
        upsampler.push(b.conv(g, &prefix)?);
    }
    let backbone = BackboneParams { convs, upsampler, upsample_mode: cfg.upsample };

    let gru = if cfg.enable_fa {
        Some(GruParams {
            update: b.conv(g, "gru.update")?,
            reset: b.conv(g, "gru.reset")?,
            candidate: b.conv(g, "gru.candidate")?,
        })
    } else {
        None
    };

    let hint = if cfg.enable_dh {
        Some(HintParams { squeeze: b.conv(g, "depth_hint.squeeze")?, column: b.conv(g, "depth_hint.column")? })
    } else {
        None
    };

    let keypoint_head = b.head(g, "keypoint")?;
    let group_heads =
        [b.head(g, "box2d")?, b.head(g, "dim_angle")?, b.head(g, "offset3d")?, b.head(g, "depth")?];

    Ok(BoundParams { backbone, gru, keypoint_head, group_heads, hint, leaf_ids: b.leaf_ids })
}

/// One forward pass over a single image.
pub struct NetworkOutput {
    /// `[C, H/4, W/4]`, sigmoid applied; values strictly inside (0, 1).
    pub heatmap: TensorId,
    /// Raw regression maps in group order; channels (4, 5, 2, 1).
    pub groups: [TensorId; 4],
    /// `[H/32]` row-wise depth hint in meters (only with depth hint enabled).
    pub hint_vector: Option<TensorId>,
}

/// Run the network. With feature association the four group heads read the
/// four GRU timesteps (reversed assignment when configured); without it they
/// read the shared feature directly. The keypoint head always reads the
/// shared feature. The depth head input is widened by the hint map when the
/// depth hint module is enabled.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, params: &BoundParams, image: TensorId) -> Result<NetworkOutput> {
    cfg.validate()?;
    let shape = g.shape(image);
    if shape != [3, cfg.height, cfg.width] {
        return Err(Error::dim(
            "forward",
            format!("image shape {shape:?} does not match configured {}x{}", cfg.height, cfg.width),
        ));
    }

    let (deep, feat) = backbone_forward(g, &params.backbone, image)?;

    let hint = match &params.hint {
        Some(h) => Some(depth_hint_forward(g, h, deep)?),
        None => None,
    };

    // Feature seen by each group head.
    let group_features: [TensorId; 4] = if let Some(cell) = &params.gru {
        let (fh, fw) = cfg.feat_hw();
        let mut h = g.leaf_from(vec![FEAT_CHANNELS, fh, fw], vec![0.0; FEAT_CHANNELS * fh * fw], false);
        let mut states = Vec::with_capacity(4);
        for _ in 0..4 {
            h = convgru_step(g, cell, feat, h)?;
            states.push(h);
        }
        let mut feats = [states[0]; 4];
        for (t, &state) in states.iter().enumerate() {
            let group = if cfg.reversed_order { 3 - t } else { t };
            feats[group] = state;
        }
        feats
    } else {
        [feat; 4]
    };

    let kp_raw = head_forward(g, &params.keypoint_head, feat)?;
    let heatmap = g.sigmoid(kp_raw);

    let mut groups = [heatmap; 4];
    for gi in 0..4 {
        let input = if gi == 3 {
            match &hint {
                Some((_, map)) => g.concat_channels(group_features[gi], *map)?,
                None => group_features[gi],
            }
        } else {
            group_features[gi]
        };
        groups[gi] = head_forward(g, &params.group_heads[gi], input)?;
    }

    Ok(NetworkOutput { heatmap, groups, hint_vector: hint.map(|(v, _)| v) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::parameter_inventory;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            categories: 3,
            height: 64,
            width: 96,
            backbone_width: 32,
            ..ModelConfig::default()
        }
    }

    fn toy_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * cfg.height * cfg.width;
        Tensor::from_vec(vec![3, cfg.height, cfg.width], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn output_shapes_follow_the_branch_list() {
        let cfg = toy_cfg();
        let store = ParamStore::init(&cfg, 3);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store, &cfg, &|_| false).unwrap();
        let img = toy_image(&cfg, 0);
        let image = g.leaf(&img);
        let out = forward(&mut g, &cfg, &bound, image).unwrap();
        assert_eq!(g.shape(out.heatmap), &[3, 16, 24]);
        for (gi, want) in GROUP_CHANNELS.iter().enumerate() {
            assert_eq!(g.shape(out.groups[gi]), &[*want, 16, 24]);
        }
        assert_eq!(g.shape(out.hint_vector.unwrap()), &[2]);
        assert!(g.value(out.heatmap).iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn ablation_contract_shapes_without_fa_dh() {
        let cfg = ModelConfig { enable_fa: false, enable_dh: false, ..toy_cfg() };
        let store = ParamStore::init(&cfg, 3);
        assert!(store.names().all(|n| !n.starts_with("gru.") && !n.starts_with("depth_hint.")));
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store, &cfg, &|_| false).unwrap();
        let img = toy_image(&cfg, 0);
        let image = g.leaf(&img);
        let out = forward(&mut g, &cfg, &bound, image).unwrap();
        assert_eq!(g.shape(out.heatmap), &[3, 16, 24]);
        assert!(out.hint_vector.is_none());
    }

    #[test]
    fn reversed_order_requires_fa_and_keeps_shapes() {
        let bad = ModelConfig { enable_fa: false, reversed_order: true, ..toy_cfg() };
        assert!(bad.validate().is_err());

        let cfg = ModelConfig { reversed_order: true, enable_dh: false, ..toy_cfg() };
        let store = ParamStore::init(&cfg, 3);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store, &cfg, &|_| false).unwrap();
        let img = toy_image(&cfg, 0);
        let image = g.leaf(&img);
        let out = forward(&mut g, &cfg, &bound, image).unwrap();
        for (gi, want) in GROUP_CHANNELS.iter().enumerate() {
            assert_eq!(g.shape(out.groups[gi])[0], *want);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = toy_cfg();
        let store = ParamStore::init(&cfg, 5);
        let img = toy_image(&cfg, 1);
        let run = || {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &store, &cfg, &|_| false).unwrap();
            let image = g.leaf(&img);
            let out = forward(&mut g, &cfg, &bound, image).unwrap();
            let mut v = g.value(out.heatmap).to_vec();
            for gi in 0..4 {
                v.extend_from_slice(g.value(out.groups[gi]));
            }
            v
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zeroed_gru_collapses_regression_maps_to_per_channel_constants() {
        let cfg = ModelConfig { enable_dh: false, ..toy_cfg() };
        let mut store = ParamStore::init(&cfg, 6);
        for gate in ["update", "reset", "candidate"] {
            for part in ["weight", "bias"] {
                let t = store.get_mut(&format!("gru.{gate}.{part}")).unwrap();
                t.values_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store, &cfg, &|_| false).unwrap();
        let img = toy_image(&cfg, 2);
        let image = g.leaf(&img);
        let out = forward(&mut g, &cfg, &bound, image).unwrap();
        for gi in 0..4 {
            let map = g.value(out.groups[gi]);
            let s = g.shape(out.groups[gi]);
            let plane = s[1] * s[2];
            for c in 0..s[0] {
                let v0 = map[c * plane];
                assert!(
                    map[c * plane..(c + 1) * plane].iter().all(|v| (*v - v0).abs() < 1e-9),
                    "group {gi} channel {c} not constant"
                );
            }
        }
    }

    #[test]
    fn wrong_image_shape_is_a_dimension_error() {
        let cfg = toy_cfg();
        let store = ParamStore::init(&cfg, 3);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store, &cfg, &|_| false).unwrap();
        let image = g.leaf_from(vec![3, 32, 96], vec![0.0; 3 * 32 * 96], false);
        assert!(matches!(forward(&mut g, &cfg, &bound, image), Err(Error::Dimension { .. })));
    }

    #[test]
    fn kitti_scale_shapes() {
        // full-resolution geometry bookkeeping only (no forward pass)
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feat_hw(), (96, 320));
        assert_eq!(cfg.deep_hw(), (12, 40));
        let inv = parameter_inventory(&cfg);
        assert!(inv.iter().any(|(n, s)| n == "heads.depth.conv3x3.weight" && s == &vec![32, 65, 3, 3]));
    }

    #[test]
    fn parameter_inventories_differ_exactly_by_documented_blocks() {
        let mut baseline = toy_cfg();
        Variant::Baseline.apply(&mut baseline);
        let mut full = toy_cfg();
        Variant::Full.apply(&mut full);
        let b: std::collections::BTreeSet<String> =
            parameter_inventory(&baseline).into_iter().map(|(n, _)| n).collect();
        let f: std::collections::BTreeSet<String> =
            parameter_inventory(&full).into_iter().map(|(n, _)| n).collect();
        let added: Vec<&String> = f.difference(&b).collect();
        assert_eq!(added.len(), 10); // 3 gates + 2 hint convs, weight+bias each
        assert!(added.iter().all(|n| n.starts_with("gru.") || n.starts_with("depth_hint.")));
    }
}
