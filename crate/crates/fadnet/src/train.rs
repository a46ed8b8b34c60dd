//! Stage-wise training loop: adaptive-moment optimizer, per-stage parameter
//! freezing and loss-term exclusion, per-epoch CSV logging, and
//! checkpointing that restores the exact optimizer state.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::decode::{decode_detections, extract_keypoints, Detection, OutputMaps};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DimensionTemplate};
use crate::kitti::{build_targets, TargetConfig, TrainingTargets};
use crate::losses::{batch_loss, frame_loss_terms, LossConfig, StageLossMask};
use crate::model::{bind_params, forward, ModelConfig};
use crate::params::{parameter_inventory, ParamStore};
use crate::synthetic::{channel_stats, normalize_image, SyntheticScene};
use crate::tensor::{Graph, Tensor};

/// One stage of the schedule.
#[derive(Debug, Clone)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
    /// Halve the learning rate every this many epochs within the stage
    /// (0 disables halving).
    pub lr_halve_every: usize,
    /// Dotted-path prefixes of parameters that stay fixed.
    pub frozen_prefixes: Vec<String>,
    pub loss_mask: StageLossMask,
    /// L2 decay added to gradients of trainable parameters.
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
}

impl StageSchedule {
    /// Stage-wise schedule with the published structure: full training with
    /// halving, then the hint module frozen and its loss dropped, then the
    /// keypoint and 2D heads frozen with only the 3D loss and weight decay.
    /// Epoch counts are (3, 1, 1) * `unit`; learning rates as given.
    pub fn staged(unit: usize, lr1: f64, lr23: f64, batch_size: usize, cfg: &ModelConfig) -> Self {
        let hint_frozen = if cfg.enable_dh { vec!["depth_hint.".to_string()] } else { vec![] };
        let mut stage3_frozen = hint_frozen.clone();
        stage3_frozen.push("heads.keypoint.".to_string());
        stage3_frozen.push("heads.box2d.".to_string());
        let dh_on = cfg.enable_dh;
        StageSchedule {
            stages: vec![
                Stage {
                    epochs: 3 * unit,
                    lr: lr1,
                    lr_halve_every: unit,
                    frozen_prefixes: vec![],
                    loss_mask: StageLossMask { dh: dh_on, ..Default::default() },
                    weight_decay: 0.0,
                },
                Stage {
                    epochs: unit,
                    lr: lr23,
                    lr_halve_every: 0,
                    frozen_prefixes: hint_frozen,
                    loss_mask: StageLossMask { dh: false, ..Default::default() },
                    weight_decay: 0.0,
                },
                Stage {
                    epochs: unit,
                    lr: lr23,
                    lr_halve_every: 0,
                    frozen_prefixes: stage3_frozen,
                    loss_mask: StageLossMask { kp: false, reg2d: false, reg3d: true, dh: false },
                    weight_decay: 1e-5,
                },
            ],
            batch_size,
        }
    }

    /// Desk-scale default: the published 90/30/30 epochs and 2e-4 / 3e-5
    /// learning rates scaled down tenfold.
    pub fn desk_default(cfg: &ModelConfig) -> Self {
        StageSchedule::staged(3, 2e-4, 3e-5, 2, cfg)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Map a global epoch index to (stage index, epoch within stage).
    pub fn locate(&self, epoch: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (si, stage) in self.stages.iter().enumerate() {
            if epoch < start + stage.epochs {
                return Some((si, epoch - start));
            }
            start += stage.epochs;
        }
        None
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::param("schedule", "at least one stage required"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("schedule", "batch size must be >= 1"));
        }
        let names: Vec<String> = parameter_inventory(cfg).into_iter().map(|(n, _)| n).collect();
        for (si, stage) in self.stages.iter().enumerate() {
            for prefix in &stage.frozen_prefixes {
                if !names.iter().any(|n| n.starts_with(prefix.as_str())) {
                    return Err(Error::param(
                        "schedule",
                        format!("stage {} freezes `{prefix}` which matches no parameter", si + 1),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state (decay 0.9 / 0.999, epsilon 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub step: usize,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect::<BTreeMap<_, _>>()
        };
        Adam { step: 0, m: zeros(params), v: zeros(params) }
    }

    /// One update over the gradients; frozen parameters are untouched and
    /// exempt from weight decay.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
        frozen: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            if frozen(&name) {
                continue;
            }
            let Some(grad) = grads.get(&name) else { continue };
            let tensor = params.get_mut(&name)?;
            let m = self.m.get_mut(&name).expect("moment buffers track params");
            let v = self.v.get_mut(&name).expect("moment buffers track params");
            let values = tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i] + weight_decay * values[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One training sample: a standardized image with its targets and camera.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: usize,
    pub image: Tensor,
    pub targets: TrainingTargets,
    pub intrinsics: CameraIntrinsics,
}

/// Build standardized samples from synthetic scenes, returning the
/// per-channel statistics used (stored in checkpoints for inference).
pub fn samples_from_scenes(
    scenes: &[SyntheticScene],
    target_cfg: &TargetConfig,
) -> Result<(Vec<TrainSample>, [f64; 3], [f64; 3])> {
    let (mean, std) = channel_stats(scenes);
    let mut samples = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let targets = build_targets(&scene.to_frame(), target_cfg)?;
        let mut image = scene.image.clone();
        normalize_image(&mut image, &mean, &std);
        samples.push(TrainSample { id: scene.id, image, targets, intrinsics: scene.intrinsics });
    }
    Ok((samples, mean, std))
}

/// Per-epoch log row. Parts are unweighted by lambda (the 2D part includes
/// its depth-aware factors); excluded terms log as zero.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub kp: f64,
    pub reg2d: f64,
    pub reg3d: f64,
    pub dh: f64,
    pub total: f64,
}

pub fn log_csv_header() -> &'static str {
    "epoch,lr,L_kp,L_reg2d,L_reg3d,L_dh,total\n"
}

pub fn log_csv_row(l: &EpochLog) -> String {
    format!(
        "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
        l.epoch, l.lr, l.kp, l.reg2d, l.reg3d, l.dh, l.total
    )
}

/// Everything the trainer owns between epochs.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub loss_cfg: LossConfig,
    pub schedule: StageSchedule,
    pub templates: Vec<DimensionTemplate>,
    pub params: ParamStore,
    pub adam: Adam,
    /// Next epoch to run (global across stages).
    pub epoch: usize,
    pub seed: u64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub logs: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        loss_cfg: LossConfig,
        schedule: StageSchedule,
        templates: Vec<DimensionTemplate>,
        seed: u64,
        norm: ([f64; 3], [f64; 3]),
    ) -> Result<Self> {
        model_cfg.validate()?;
        loss_cfg.validate()?;
        schedule.validate(&model_cfg)?;
        let params = ParamStore::init(&model_cfg, seed);
        let adam = Adam::new(&params);
        Ok(Trainer {
            model_cfg,
            loss_cfg,
            schedule,
            templates,
            params,
            adam,
            epoch: 0,
            seed,
            norm_mean: norm.0,
            norm_std: norm.1,
            logs: Vec::new(),
        })
    }

    /// Train until the schedule is exhausted. Saves a checkpoint into
    /// `out_dir` (stem "model") after every epoch that produced finite
    /// losses, so the on-disk state is always the last good epoch.
    pub fn run(&mut self, samples: &[TrainSample], out_dir: Option<&Path>) -> Result<()> {
        let total = self.schedule.total_epochs();
        while self.epoch < total {
            self.run_epoch(samples)?;
            if let Some(dir) = out_dir {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    /// One epoch: shuffle deterministically by (seed, epoch), run batches,
    /// log the averaged loss parts.
    pub fn run_epoch(&mut self, samples: &[TrainSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let (stage_idx, local_epoch) = self
            .schedule
            .locate(self.epoch)
            .ok_or_else(|| Error::param("train", "epoch beyond schedule"))?;
        let stage = self.schedule.stages[stage_idx].clone();
        let halvings = if stage.lr_halve_every > 0 { local_epoch / stage.lr_halve_every } else { 0 };
        let lr = stage.lr * 0.5_f64.powi(halvings as i32);
        let frozen_prefixes = stage.frozen_prefixes.clone();
        let frozen = |name: &str| frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);

        let mask = stage.loss_mask;
        let mut sums = EpochLog { epoch: self.epoch, lr, kp: 0.0, reg2d: 0.0, reg3d: 0.0, dh: 0.0, total: 0.0 };
        let mut steps = 0usize;

        for chunk in order.chunks(self.schedule.batch_size) {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &self.params, &self.model_cfg, &|name| !frozen(name))?;
            let mut frame_terms = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &samples[idx];
                let image = g.leaf(&sample.image);
                let out = forward(&mut g, &self.model_cfg, &bound, image)?;
                frame_terms.push(frame_loss_terms(
                    &mut g,
                    &out,
                    &sample.targets,
                    &sample.intrinsics,
                    &self.templates,
                    &self.loss_cfg,
                )?);
            }
            let batch = batch_loss(&mut g, &frame_terms, &self.loss_cfg, &mask)?;
            let total_value = g.scalar_value(batch.total);
            if !total_value.is_finite() {
                return Err(Error::Divergence { term: "total".into() });
            }
            g.backward(batch.total)?;

            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, id) in &bound.leaf_ids {
                if let Some(grad) = g.grad(*id) {
                    grads.insert(name.clone(), grad.to_vec());
                }
            }
            self.adam.update(&mut self.params, &grads, lr, stage.weight_decay, &frozen)?;

            let part = |id: Option<crate::tensor::TensorId>| id.map(|i| g.scalar_value(i)).unwrap_or(0.0);
            sums.kp += part(batch.parts.kp);
            sums.reg2d += part(batch.parts.reg2d);
            sums.reg3d += part(batch.parts.reg3d);
            sums.dh += part(batch.parts.dh);
            sums.total += total_value;
            steps += 1;
        }

        let n = steps as f64;
        sums.kp /= n;
        sums.reg2d /= n;
        sums.reg3d /= n;
        sums.dh /= n;
        sums.total /= n;
        self.logs.push(sums);
        self.epoch += 1;
        Ok(())
    }

    /// Full weighted loss over a sample set without updating parameters.
    pub fn evaluate_loss(&self, samples: &[TrainSample]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.params, &self.model_cfg, &|_| false)?;
        let mut frame_terms = Vec::new();
        for sample in samples {
            let image = g.leaf(&sample.image);
            let out = forward(&mut g, &self.model_cfg, &bound, image)?;
            frame_terms.push(frame_loss_terms(
                &mut g,
                &out,
                &sample.targets,
                &sample.intrinsics,
                &self.templates,
                &self.loss_cfg,
            )?);
        }
        let batch = batch_loss(&mut g, &frame_terms, &self.loss_cfg, &StageLossMask::default())?;
        Ok(g.scalar_value(batch.total))
    }

    /// Run the network on one standardized image and decode detections.
    pub fn infer(
        &self,
        image: &Tensor,
        intrinsics: &CameraIntrinsics,
        threshold: f64,
        topk: usize,
    ) -> Result<(Vec<Detection>, usize)> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.params, &self.model_cfg, &|_| false)?;
        let image_id = g.leaf(image);
        let out = forward(&mut g, &self.model_cfg, &bound, image_id)?;
        let maps = OutputMaps::from_graph(&g, &out);
        let kps = extract_keypoints(&maps.heatmap, threshold, topk)?;
        decode_detections(&maps, &kps, intrinsics, &self.templates)
    }

    // ── checkpointing ───────────────────────────────────────────────────

    /// Save parameters, optimizer moments, trainer scalars, normalization
    /// stats, and dimension templates under reserved name prefixes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = self.params.as_map().clone();
        for (name, m) in &self.adam.m {
            entries.insert(format!("optim.m.{name}"), Tensor::from_vec(vec![m.len()], m.clone())?);
        }
        for (name, v) in &self.adam.v {
            entries.insert(format!("optim.v.{name}"), Tensor::from_vec(vec![v.len()], v.clone())?);
        }
        entries.insert("state.step".into(), Tensor::scalar(self.adam.step as f64));
        entries.insert("state.epoch".into(), Tensor::scalar(self.epoch as f64));
        entries.insert("state.seed".into(), Tensor::scalar(self.seed as f64));
        entries.insert("norm.mean".into(), Tensor::from_vec(vec![3], self.norm_mean.to_vec())?);
        entries.insert("norm.std".into(), Tensor::from_vec(vec![3], self.norm_std.to_vec())?);
        let template_values: Vec<f64> = self.templates.iter().flat_map(|t| [t.h, t.w, t.l]).collect();
        entries.insert(
            "templates".into(),
            Tensor::from_vec(vec![self.templates.len(), 3], template_values)?,
        );
        checkpoint::save(dir, "model", &entries)
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn load(
        dir: &Path,
        model_cfg: ModelConfig,
        loss_cfg: LossConfig,
        schedule: StageSchedule,
    ) -> Result<Self> {
        let mut entries = checkpoint::load(dir, "model")?;
        let scalar = |entries: &BTreeMap<String, Tensor>, key: &str| -> Result<f64> {
            entries
                .get(key)
                .map(|t| t.values()[0])
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))
        };
        let step = scalar(&entries, "state.step")? as usize;
        let epoch = scalar(&entries, "state.epoch")? as usize;
        let seed = scalar(&entries, "state.seed")? as u64;
        let mean_t = entries.remove("norm.mean").ok_or_else(|| Error::Checkpoint("missing norm.mean".into()))?;
        let std_t = entries.remove("norm.std").ok_or_else(|| Error::Checkpoint("missing norm.std".into()))?;
        let templates_t =
            entries.remove("templates").ok_or_else(|| Error::Checkpoint("missing templates".into()))?;
        let templates: Vec<DimensionTemplate> = templates_t
            .values()
            .chunks(3)
            .map(|c| DimensionTemplate::new(c[0], c[1], c[2]))
            .collect::<Result<_>>()?;
        entries.remove("state.step");
        entries.remove("state.epoch");
        entries.remove("state.seed");

        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut params = BTreeMap::new();
        for (name, tensor) in entries {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                m.insert(rest.to_string(), tensor.values().to_vec());
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                v.insert(rest.to_string(), tensor.values().to_vec());
            } else {
                params.insert(name, tensor);
            }
        }
        // the stored inventory must match the configured model
        let expected: BTreeSet<String> = parameter_inventory(&model_cfg).into_iter().map(|(n, _)| n).collect();
        let got: BTreeSet<String> = params.keys().cloned().collect();
        if expected != got {
            let missing: Vec<_> = expected.difference(&got).take(3).collect();
            let extra: Vec<_> = got.difference(&expected).take(3).collect();
            return Err(Error::Checkpoint(format!(
                "parameter set does not match the model config (missing {missing:?}, unexpected {extra:?})"
            )));
        }

        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        mean.copy_from_slice(mean_t.values());
        std.copy_from_slice(std_t.values());

        Ok(Trainer {
            model_cfg,
            loss_cfg,
            schedule,
            templates,
            params: ParamStore::from_map(params),
            adam: Adam { step, m, v },
            epoch,
            seed,
            norm_mean: mean,
            norm_std: std,
            logs: Vec::new(),
        })
    }
}
