use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{alignment_loss, masked_forward, reconstruction_loss, sample_mask, teacher_targets, AlignTarget, ReconGroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{augment, make_patches, Augmentation, PointCloud};
use crate::model::checkpoint::{Checkpoint, Progress};
use crate::model::{Forward, ModelState, Pipeline, ReconTarget};
use crate::numerics::{NumericsError, ParamId, Tape, Tensor};
use crate::optim::{cosine_lr, grad_norm, AdamW, AdamWConfig};
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Linear warmup length, capped at a tenth of the run.
    pub warmup_epochs: usize,
    pub ema_momentum: f64,
    /// Weight of the alignment term; 0 leaves the regressor unconstrained.
    pub align_weight: f64,
    pub align_target: AlignTarget,
    pub augmentation: Augmentation,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 10,
            ema_momentum: 0.999,
            align_weight: 1.0,
            align_target: AlignTarget::Cosine,
            augmentation: Augmentation::scale_translate_default(),
            checkpoint_every: 10,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("pretrain.min_lr", "must lie in [0, lr]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("pretrain.weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("pretrain.ema_momentum", "must lie in [0, 1]"));
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return Err(Error::config("pretrain.align_weight", "must be non-negative"));
        }
        if let AlignTarget::InfoNce { temperature } | AlignTarget::NtXent { temperature } = self.align_target {
            if !(temperature > 0.0) {
                return Err(Error::config("pretrain.align_target.temperature", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// One optimizer step, averaged over the batch. `l_align` already carries
/// the alignment weight, so `l_total = l_rec + l_align`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub l_rec: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

const LOG_HEADER: [&str; 8] = ["step", "epoch", "l_rec", "l_align", "l_total", "lr", "grad_norm", "seconds"];

/// Writes the per-step log as CSV; an empty history still gets a header.
pub fn write_log(path: &Path, reports: &[LossReport]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(LOG_HEADER).map_err(io)?;
    for r in reports {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-cloud loss values and parameter gradients.
struct CloudOutcome {
    rec: f64,
    align: f64,
    total: f64,
    grads: BTreeMap<ParamId, Tensor>,
}

/// Owns the model and optimizer across a pretraining run.
pub struct Trainer {
    pub state: ModelState,
    pub optimizer: AdamW,
    pub config: PretrainConfig,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(state: ModelState, config: PretrainConfig, seed: u64, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        state.config.validate()?;
        if dataset_len == 0 {
            return Err(Error::contract("pretraining needs at least one cloud"));
        }
        let optimizer = AdamW::new(config.adamw(), &state.params);
        let steps_per_epoch = dataset_len.div_ceil(config.batch_size);
        Ok(Self { state, optimizer, config, seed, step: 0, epoch: 0, steps_per_epoch })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: PretrainConfig, dataset_len: usize) -> Result<Self> {
        let mut t = Self::new(ckpt.model, config, ckpt.progress.seed, dataset_len)?;
        if let Some(opt) = ckpt.optimizer {
            t.optimizer = opt;
        }
        t.step = ckpt.progress.step;
        t.epoch = ckpt.progress.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self, run_config: Option<String>) -> Checkpoint {
        Checkpoint {
            model: self.state.clone(),
            optimizer: Some(self.optimizer.clone()),
            progress: Progress { seed: self.seed, step: self.step, epoch: self.epoch },
            run_config,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps();
        let warmup = (self.config.warmup_epochs * self.steps_per_epoch).min(total / 10);
        cosine_lr(step as usize, total, warmup, self.config.lr, self.config.min_lr)
    }

    /// One pass over `clouds` in a seed-determined order. `features` holds
    /// per-cloud `[S, feature_dim]` targets for the external-features mode.
    pub fn train_epoch(&mut self, clouds: &[PointCloud], features: Option<&[Tensor]>) -> Result<Vec<LossReport>> {
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        let mut rng = seed::rng(self.seed, Stream::Shuffle, self.epoch);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut reports = Vec::with_capacity(self.steps_per_epoch);
        for batch in order.chunks(self.config.batch_size) {
            reports.push(self.step_batch(clouds, batch, features)?);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Forward and backward on each cloud of `batch`, one AdamW step on the
    /// averaged gradient, then the EMA update of the teacher.
    pub fn step_batch(&mut self, clouds: &[PointCloud], batch: &[usize], features: Option<&[Tensor]>) -> Result<LossReport> {
        let start = Instant::now();
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut sum: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let (mut rec, mut align, mut total) = (0.0, 0.0, 0.0);
        for &idx in batch {
            let feats = features.map(|f| &f[idx]);
            let out = self.cloud_step(&clouds[idx], idx, feats).map_err(|e| match e {
                Error::Numerics(NumericsError::NonFinite { op }) => Error::NonFiniteLoss {
                    step: self.step as usize,
                    detail: format!("cloud {idx}: non-finite value produced by {op}"),
                },
                other => other,
            })?;
            rec += out.rec;
            align += out.align;
            total += out.total;
            for (id, g) in out.grads {
                match sum.get_mut(&id) {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => {
                        sum.insert(id, g);
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in sum.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let norm = grad_norm(&sum);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step as usize, detail: format!("gradient norm {norm}") });
        }
        let lr = self.lr_at(self.step);
        let backbone = 0..self.state.layout.backbone_len;
        self.optimizer.step(&mut self.state.params, &sum, lr, backbone);
        self.state.ema_update(self.config.ema_momentum)?;
        let report = LossReport {
            step: self.step,
            epoch: self.epoch,
            l_rec: rec * inv,
            l_align: align * inv,
            l_total: total * inv,
            lr,
            grad_norm: norm,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(report)
    }

    fn cloud_step(&self, cloud: &PointCloud, idx: usize, features: Option<&Tensor>) -> Result<CloudOutcome> {
        let cfg = &self.state.config;
        let key = (self.step << 24) ^ idx as u64;
        let external = cfg.recon_target == ReconTarget::ExternalFeatures;
        // external targets are tied to one fixed patching of each cloud
        let (input, patch_seed) = if external {
            (cloud.clone(), seed::derive(self.seed, Stream::Patch, idx as u64))
        } else {
            let aug = augment(cloud, &self.config.augmentation, seed::derive(self.seed, Stream::Augment, key));
            (aug, seed::derive(self.seed, Stream::Patch, key))
        };
        let patches = make_patches(&input, cfg.patch_count, cfg.neighbors, patch_seed)?;
        let plan = sample_mask(cfg.patch_count, cfg.mask_ratio, seed::derive(self.seed, Stream::Mask, key))?;

        let aligned = cfg.pipeline == Pipeline::Regress && self.config.align_weight > 0.0;
        let target = if aligned { Some(teacher_targets(&self.state, &patches, &plan)?) } else { None };

        let mut tape = Tape::with_precision(cfg.precision);
        let mut f = Forward::student(&mut tape, &self.state);
        let (out, predicted) = masked_forward(&mut f, &patches, &plan)?;

        let feature_rows;
        let gt = match features {
            Some(all) if external => {
                feature_rows = Tensor::new(
                    vec![plan.masked.len(), all.cols()],
                    plan.masked.iter().flat_map(|&i| all.row(i).iter().copied()).collect(),
                )?;
                ReconGroundTruth::Features(&feature_rows)
            }
            None if external => return Err(Error::contract("external_features target needs per-cloud feature tensors")),
            _ => ReconGroundTruth::Coordinates { patches: &patches, masked: &plan.masked },
        };
        let rec = reconstruction_loss(&mut tape, out, gt, cfg.recon_target)?;
        let (total, align) = match (target, predicted) {
            (Some(t), Some(pred)) => {
                let a = alignment_loss(&mut tape, pred, &t, self.config.align_target)?;
                let a = tape.scale(a, self.config.align_weight)?;
                (tape.add(rec, a)?, Some(a))
            }
            _ => (rec, None),
        };
        let grads = tape.backward(total)?.into_params();
        Ok(CloudOutcome {
            rec: tape.value(rec).item(),
            align: align.map_or(0.0, |a| tape.value(a).item()),
            total: tape.value(total).item(),
            grads,
        })
    }
}
