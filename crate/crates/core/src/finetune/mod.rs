//! Downstream classification: backbone feature topologies, the three
//! transfer protocols, and few-shot episodes.

mod fewshot;

pub use fewshot::{few_shot, few_shot_episode, Episode, FewShotSummary};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{augment, farthest_point_sample, make_patches, Augmentation, PointCloud};
use crate::model::{pool_concat, points_tensor, BindMode, Binder, BnStats, Forward, HeadMode, HeadSpec, ModelState, Protocol};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::seed::{self, Stream};

/// Feature construction from the fine-tuned backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Pool encoder tokens.
    A,
    /// Pool regressor predictions at virtual queries.
    B,
    /// Pool the concatenation of encoder tokens and predictions.
    C,
    /// Pool each stream, then combine.
    D,
}

impl Topology {
    pub const ALL: [Topology; 4] = [Topology::A, Topology::B, Topology::C, Topology::D];

    pub fn name(self) -> &'static str {
        match self {
            Topology::A => "a",
            Topology::B => "b",
            Topology::C => "c",
            Topology::D => "d",
        }
    }

    pub fn parse(s: &str) -> Option<Topology> {
        Self::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s.trim_matches(|c| c == '(' || c == ')')))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub variant: Topology,
    /// Virtual query count; `None` uses half the patch count.
    #[serde(default)]
    pub queries: Option<usize>,
    /// Topology D only; `None` picks concat for classification and add for
    /// few-shot.
    #[serde(default)]
    pub combine: Option<Combine>,
}

impl TopologySpec {
    pub fn new(variant: Topology) -> Self {
        Self { variant, queries: None, combine: None }
    }

    pub fn query_count(&self, patch_count: usize) -> usize {
        self.queries.unwrap_or(patch_count / 2)
    }

    pub fn combine_op(&self) -> Combine {
        self.combine.unwrap_or(Combine::Concat)
    }

    /// Width of the pooled feature for token width `d`.
    pub fn feature_dim(&self, d: usize) -> usize {
        match (self.variant, self.combine_op()) {
            (Topology::D, Combine::Concat) => 4 * d,
            _ => 2 * d,
        }
    }
}

/// Seeds for one feature extraction: patch centers and virtual queries come
/// from disjoint streams.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSeeds {
    pub patch: u64,
    pub query: u64,
}

impl FeatureSeeds {
    pub fn new(run_seed: u64, key: u64) -> Self {
        Self { patch: seed::derive(run_seed, Stream::Patch, key), query: seed::derive(run_seed, Stream::Query, key) }
    }
}

/// `[1, feature_dim]` feature of one cloud: all patches encoded without
/// masking, then pooled per topology.
pub fn backbone_features(f: &mut Forward, cloud: &PointCloud, spec: &TopologySpec, seeds: FeatureSeeds) -> Result<Var> {
    let (s, k) = (f.config.patch_count, f.config.neighbors);
    let patches = make_patches(cloud, s, k, seeds.patch)?;
    let embedded = f.embed_patches(&patches)?;
    let encoded = f.encode(&embedded)?;
    if spec.variant == Topology::A {
        return Ok(pool_concat(f.tape, encoded.tokens)?);
    }
    let q = spec.query_count(s);
    if q == 0 {
        return Err(Error::contract(format!("topology {} needs at least one virtual query", spec.variant.name())));
    }
    if q > cloud.len() {
        return Err(Error::contract(format!("{} virtual queries on a {}-point cloud", q, cloud.len())));
    }
    let idx = farthest_point_sample(cloud, q, seeds.query)?;
    let pts: Vec<_> = idx.iter().map(|&i| cloud.points()[i]).collect();
    let positions = f.tape.constant(points_tensor(&pts))?;
    let predicted = f.regress(&encoded, positions)?;
    let out = match spec.variant {
        Topology::A => unreachable!(),
        Topology::B => pool_concat(f.tape, predicted.tokens)?,
        Topology::C => {
            let joined = f.tape.concat_rows(&[encoded.tokens, predicted.tokens])?;
            pool_concat(f.tape, joined)?
        }
        Topology::D => {
            let a = pool_concat(f.tape, encoded.tokens)?;
            let b = pool_concat(f.tape, predicted.tokens)?;
            match spec.combine_op() {
                Combine::Concat => f.tape.concat_cols(&[a, b])?,
                Combine::Add => f.tape.add(a, b)?,
            }
        }
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub protocol: Protocol,
    pub topology: TopologySpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None`: 5e-4 for FULL, 1e-2 for head-only protocols.
    pub lr: Option<f64>,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Train-time augmentation for FULL (frozen protocols use fixed
    /// features).
    pub augmentation: Augmentation,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Full,
            topology: TopologySpec::new(Topology::B),
            epochs: 30,
            batch_size: 16,
            lr: None,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 3,
            augmentation: Augmentation::scale_translate_default(),
        }
    }
}

impl FinetuneConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.protocol == Protocol::Full { 5e-4 } else { 1e-2 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("finetune.batch_size", "batch normalization needs at least 2 samples"));
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("finetune.lr", "must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= lr) {
            return Err(Error::config("finetune.min_lr", "must lie in [0, lr]"));
        }
        if self.topology.variant != Topology::A && self.topology.queries == Some(0) {
            return Err(Error::config("finetune.topology.queries", "topologies b, c and d need at least one query"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Key offset separating evaluation feature seeds from training ones.
const EVAL_KEY: u64 = 1 << 62;

/// Splits `n` shuffled items into batches, folding a trailing single item
/// into the previous batch so batch statistics are defined.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let right = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let arg = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == l
        })
        .count();
    right as f64 / labels.len().max(1) as f64
}

/// A classification run on top of a pretrained backbone.
pub struct Finetuner {
    pub state: ModelState,
    pub config: FinetuneConfig,
    pub seed: u64,
    pub epoch: usize,
    optimizer: AdamW,
    n_classes: usize,
    steps_per_epoch: usize,
    step: usize,
    /// Fixed features of the training set for frozen protocols.
    frozen_train: Option<Tensor>,
}

impl Finetuner {
    /// Attaches a fresh head sized for the topology and protocol.
    pub fn new(mut state: ModelState, config: FinetuneConfig, n_classes: usize, seed: u64, train_len: usize) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 {
            return Err(Error::contract("classification needs at least two classes"));
        }
        let spec = HeadSpec {
            protocol: config.protocol,
            in_dim: config.topology.feature_dim(state.config.dim),
            n_classes,
            hidden: state.config.head_hidden,
        };
        state.attach_head(spec, seed::derive(seed, Stream::HeadInit, 0));
        let optimizer = AdamW::new(
            AdamWConfig { lr: config.learning_rate(), weight_decay: config.weight_decay, ..AdamWConfig::default() },
            &state.params,
        );
        let steps_per_epoch = batches(&(0..train_len).collect::<Vec<_>>(), config.batch_size).len().max(1);
        Ok(Self { state, config, seed, epoch: 0, optimizer, n_classes, steps_per_epoch, step: 0, frozen_train: None })
    }

    /// Wraps a model whose head is already trained, for evaluation or further
    /// epochs.
    pub fn from_trained(state: ModelState, config: FinetuneConfig, seed: u64, train_len: usize) -> Result<Self> {
        config.validate()?;
        let head = state.head.as_ref().ok_or_else(|| Error::contract("model has no classification head"))?;
        let expected = config.topology.feature_dim(state.config.dim);
        if head.spec.in_dim != expected || head.spec.protocol != config.protocol {
            return Err(Error::contract(format!(
                "{} head over {} features does not match {} topology {} ({} features)",
                head.spec.protocol.name(),
                head.spec.in_dim,
                config.protocol.name(),
                config.topology.variant.name(),
                expected
            )));
        }
        let n_classes = head.spec.n_classes;
        let optimizer = AdamW::new(
            AdamWConfig { lr: config.learning_rate(), weight_decay: config.weight_decay, ..AdamWConfig::default() },
            &state.params,
        );
        let steps_per_epoch = batches(&(0..train_len).collect::<Vec<_>>(), config.batch_size).len().max(1);
        Ok(Self { state, config, seed, epoch: 0, optimizer, n_classes, steps_per_epoch, step: 0, frozen_train: None })
    }

    fn trainable(&self) -> std::ops::Range<usize> {
        let start = if self.config.protocol.freezes_backbone() { self.state.layout.backbone_len } else { 0 };
        start..self.state.params.len()
    }

    fn check_labels(&self, data: &Dataset) -> Result<Vec<usize>> {
        let labels = data.labels()?;
        if data.n_classes() != self.n_classes {
            return Err(Error::contract(format!("dataset has {} classes, head has {}", data.n_classes(), self.n_classes)));
        }
        Ok(labels)
    }

    /// Evaluation features `[n, feature_dim]` with the current weights.
    pub fn features(&self, data: &Dataset) -> Result<Tensor> {
        let mut rows = Vec::new();
        for (i, cloud) in data.clouds.iter().enumerate() {
            let mut tape = Tape::with_precision(self.state.config.precision);
            let binder = Binder::new(&self.state.params, BindMode::Constant);
            let mut f = Forward::new(&mut tape, binder, &self.state.layout, &self.state.config);
            let v = backbone_features(&mut f, cloud, &self.config.topology, FeatureSeeds::new(self.seed, EVAL_KEY | i as u64))?;
            rows.extend_from_slice(tape.value(v).data());
        }
        let width = self.config.topology.feature_dim(self.state.config.dim);
        Ok(Tensor::new(vec![data.len(), width], rows)?)
    }

    /// Head logits for precomputed features.
    fn head_logits(&self, feats: &Tensor) -> Result<Tensor> {
        let head = self.state.head.as_ref().expect("head attached");
        let mut tape = Tape::with_precision(self.state.config.precision);
        let mut p = Binder::new(&self.state.params, BindMode::Constant);
        let x = tape.constant(feats.clone())?;
        let (logits, _) = head.forward(&mut tape, &mut p, x, HeadMode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        let labels = self.check_labels(data)?;
        if data.is_empty() {
            return Ok(0.0);
        }
        let logits = self.head_logits(&self.features(data)?)?;
        Ok(accuracy(&logits, &labels))
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let logits = self.head_logits(&self.features(data)?)?;
        let c = logits.cols();
        Ok((0..logits.rows()).map(|i| (0..c).fold(0, |b, j| if logits.row(i)[j] > logits.row(i)[b] { j } else { b })).collect())
    }

    /// One pass over `train`; returns mean loss and training accuracy.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64)> {
        let labels = self.check_labels(train)?;
        if train.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        if self.config.protocol.freezes_backbone() && self.frozen_train.is_none() {
            self.frozen_train = Some(self.features(train)?);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seed::rng(self.seed, Stream::Shuffle, self.epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut loss_sum, mut right, mut seen) = (0.0, 0.0, 0usize);
        for batch in batches(&order, self.config.batch_size) {
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let total = self.steps_per_epoch * self.config.epochs;
            let warmup = (self.config.warmup_epochs * self.steps_per_epoch).min(total / 10);
            let lr = cosine_lr(self.step, total, warmup, self.config.learning_rate(), self.config.min_lr);
            let (loss, logits, grads, observed) = self.batch_forward(train, &batch, &batch_labels)?;
            let trainable = self.trainable();
            self.optimizer.step(&mut self.state.params, &grads, lr, trainable);
            self.state.head.as_mut().expect("head attached").update_running(&observed);
            loss_sum += loss * batch.len() as f64;
            right += accuracy(&logits, &batch_labels) * batch.len() as f64;
            seen += batch.len();
            self.step += 1;
        }
        self.epoch += 1;
        Ok((loss_sum / seen as f64, right / seen as f64))
    }

    #[allow(clippy::type_complexity)]
    fn batch_forward(
        &self,
        train: &Dataset,
        batch: &[usize],
        labels: &[usize],
    ) -> Result<(f64, Tensor, std::collections::BTreeMap<crate::numerics::ParamId, Tensor>, Vec<BnStats>)> {
        let head = self.state.head.as_ref().expect("head attached");
        let mut tape = Tape::with_precision(self.state.config.precision);
        let mut binder = Binder::new(&self.state.params, BindMode::Trainable);
        if self.config.protocol.freezes_backbone() {
            binder = binder.freeze_prefix(self.state.layout.backbone_len);
        }
        let mut f = Forward::new(&mut tape, binder, &self.state.layout, &self.state.config);
        let feats = match &self.frozen_train {
            Some(all) => {
                let w = all.cols();
                let rows = batch.iter().flat_map(|&i| all.row(i).iter().copied()).collect();
                f.tape.constant(Tensor::new(vec![batch.len(), w], rows)?)?
            }
            None => {
                let mut rows = Vec::with_capacity(batch.len());
                for &i in batch {
                    let key = ((self.epoch as u64) << 32) | i as u64;
                    let cloud = augment(&train.clouds[i], &self.config.augmentation, seed::derive(self.seed, Stream::Augment, key));
                    rows.push(backbone_features(&mut f, &cloud, &self.config.topology, FeatureSeeds::new(self.seed, key))?);
                }
                f.tape.concat_rows(&rows)?
            }
        };
        let mut drop_rng = seed::rng(self.seed, Stream::Dropout, self.step as u64);
        let (logits, observed) = head.forward(f.tape, &mut f.params, feats, HeadMode::Train(&mut drop_rng))?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?.into_params();
        Ok((tape.value(loss).item(), tape.value(logits).clone(), grads, observed))
    }

    /// Trains for the configured epochs, evaluating on `test` after each.
    pub fn run(&mut self, train: &Dataset, test: &Dataset) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let (train_loss, train_acc) = self.train_epoch(train)?;
            let test_acc = self.evaluate(test)?;
            history.push(EpochMetrics { epoch: self.epoch, train_loss, train_acc, test_acc });
        }
        Ok(history)
    }
}

/// One row of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub protocol: String,
    pub topology: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RESULT_HEADER: [&str; 7] = ["run_id", "protocol", "topology", "seed", "epoch", "train_acc", "test_acc"];

#[cfg(test)]
mod tests;
