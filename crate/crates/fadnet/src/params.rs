//! Named parameter tensors: canonical inventory, initialization, storage.
//!
//! Checkpoint entries use dotted `module.block.layer.{weight|bias}` paths.
//! The inventory is sorted by name and fully determined by the model config,
//! so initialization order (and therefore the RNG stream) is reproducible.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UpsampleMode, GROUP_CHANNELS, GROUP_NAMES};
use crate::tensor::Tensor;

/// Hidden width of the recurrent cell and of the shared feature map.
pub const FEAT_CHANNELS: usize = 64;
/// Mid channels of the keypoint head.
pub const KP_MID: usize = 256;
/// Mid channels of the regression heads.
pub const REG_MID: usize = 32;
/// Group-normalization groups in the heads.
pub const GN_GROUPS: usize = 8;
pub const GN_EPS: f64 = 1e-5;
/// Channel progression of the strided backbone stack (ending at `backbone_width`).
pub const BACKBONE_STAGES: [usize; 4] = [16, 32, 64, 128];

/// Deterministic, sorted list of `(name, shape)` for every parameter of the
/// configured model variant.
pub fn parameter_inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut inv: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let conv = |inv: &mut BTreeMap<String, Vec<usize>>, name: &str, c_out: usize, c_in: usize, k: usize| {
        inv.insert(format!("{name}.weight"), vec![c_out, c_in, k, k]);
        inv.insert(format!("{name}.bias"), vec![c_out]);
    };

    // Backbone: five stride-2 4x4 convolutions, 3 -> ... -> backbone_width.
    let mut c_in = 3;
    for (i, c_out) in BACKBONE_STAGES.iter().copied().chain([cfg.backbone_width]).enumerate() {
        conv(&mut inv, &format!("backbone.conv{i}"), c_out, c_in, 4);
        c_in = c_out;
    }

    // Upsampler: three x2 stages from stride 32 to stride 4.
    let mut c_in = cfg.backbone_width;
    for i in 0..3 {
        match cfg.upsample {
            UpsampleMode::Bilinear => conv(&mut inv, &format!("upsampler.conv{i}"), FEAT_CHANNELS, c_in, 3),
            UpsampleMode::Transposed => {
                // transposed-conv weight layout is [c_in, c_out, k, k]
                inv.insert(format!("upsampler.tconv{i}.weight"), vec![c_in, FEAT_CHANNELS, 4, 4]);
                inv.insert(format!("upsampler.tconv{i}.bias"), vec![FEAT_CHANNELS]);
            }
        }
        c_in = FEAT_CHANNELS;
    }

    if cfg.enable_fa {
        for gate in ["update", "reset", "candidate"] {
            conv(&mut inv, &format!("gru.{gate}"), FEAT_CHANNELS, 2 * FEAT_CHANNELS, 3);
        }
    }

    if cfg.enable_dh {
        conv(&mut inv, "depth_hint.squeeze", 1, cfg.backbone_width, 1);
        conv(&mut inv, "depth_hint.column", 1, cfg.width / 32, 1);
    }

    // Keypoint head.
    conv(&mut inv, "heads.keypoint.conv3x3", KP_MID, FEAT_CHANNELS, 3);
    inv.insert("heads.keypoint.gn.gamma".into(), vec![KP_MID]);
    inv.insert("heads.keypoint.gn.beta".into(), vec![KP_MID]);
    conv(&mut inv, "heads.keypoint.conv1x1", cfg.categories, KP_MID, 1);

    // Regression heads; the depth head widens by one channel when the hint
    // map is concatenated in.
    for (gi, name) in GROUP_NAMES.iter().enumerate() {
        let in_ch = if *name == "depth" && cfg.enable_dh { FEAT_CHANNELS + 1 } else { FEAT_CHANNELS };
        conv(&mut inv, &format!("heads.{name}.conv3x3"), REG_MID, in_ch, 3);
        inv.insert(format!("heads.{name}.gn.gamma"), vec![REG_MID]);
        inv.insert(format!("heads.{name}.gn.beta"), vec![REG_MID]);
        conv(&mut inv, &format!("heads.{name}.conv1x1"), GROUP_CHANNELS[gi], REG_MID, 1);
    }

    inv.into_iter().collect()
}

/// Parameter tensors keyed by dotted path.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Initialize parameters for `cfg` from a seed: convolution weights and
    /// biases uniform in +/- sqrt(1/fan_in), group-norm gamma = 1, beta = 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in parameter_inventory(cfg) {
            let numel: usize = shape.iter().product();
            let tensor = if name.ends_with(".gn.gamma") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".gn.beta") {
                Tensor::full(shape, 0.0)
            } else {
                // bias fan-in follows its convolution's input patch size
                let fan_in = fan_in_of(&name, &shape, cfg);
                let bound = (1.0 / fan_in as f64).sqrt();
                let values = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_vec(shape, values).unwrap()
            };
            params.insert(name, tensor);
        }
        ParamStore { params }
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        ParamStore { params }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
}

fn fan_in_of(name: &str, shape: &[usize], cfg: &ModelConfig) -> usize {
    if shape.len() == 4 {
        if name.starts_with("upsampler.tconv") {
            // weight layout [c_in, c_out, k, k]
            shape[0] * shape[2] * shape[3]
        } else {
            shape[1] * shape[2] * shape[3]
        }
    } else {
        // bias: recover the owning convolution's fan-in from the inventory
        let weight_name = name.replace(".bias", ".weight");
        parameter_inventory(cfg)
            .into_iter()
            .find(|(n, _)| *n == weight_name)
            .map(|(n, s)| fan_in_of(&n, &s, cfg))
            .unwrap_or(1)
    }
}
