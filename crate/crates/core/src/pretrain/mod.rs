//! Masked pretraining: mask sampling, the EMA teacher targets, the
//! reconstruction and alignment objectives, and the training loop.

mod trainer;

pub use trainer::{write_log, LossReport, PretrainConfig, Trainer};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_l2, make_patches, PatchSet, Point, PointCloud};
use crate::model::{masked_count, points_tensor, BindMode, Binder, Forward, ModelState, Pipeline, ReconTarget};
use crate::numerics::{Tape, Tensor, Var};
use crate::seed::{self, Stream};

/// Partition of patch indices into visible and masked sets, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Disjoint, covering `0..S`.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.len()];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

/// Uniform random choice of `floor(ratio · s)` masked patches.
pub fn sample_mask(s: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("mask ratio {} outside (0, 1)", ratio)));
    }
    let m = masked_count(s, ratio);
    if m == 0 || m >= s {
        return Err(Error::contract(format!("mask ratio {} on {} patches masks {} of them", ratio, s, m)));
    }
    let mut rng = seed::rng(seed, Stream::Mask, 0);
    let mut masked = sample(&mut rng, s, m).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; s];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..s).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { visible, masked })
}

/// `1 − s·t / (|s| |t|)`, in `[0, 2]`.
pub fn cosine_loss(s: &[f64], t: &[f64]) -> Result<f64> {
    if s.len() != t.len() {
        return Err(Error::contract(format!("cosine_loss: lengths {} and {}", s.len(), t.len())));
    }
    let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
    let ns = s.iter().map(|v| v * v).sum::<f64>();
    let nt = t.iter().map(|v| v * v).sum::<f64>();
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::contract("cosine_loss: zero-norm input"));
    }
    // sqrt of the product is exact for s == t, so identical inputs give 0
    Ok((1.0 - dot / (ns * nt).sqrt()).clamp(0.0, 2.0))
}

/// Ground truth for the masked patches.
pub enum ReconGroundTruth<'a> {
    /// Local coordinates of each masked patch.
    Coordinates { patches: &'a PatchSet, masked: &'a [usize] },
    /// `[S_m, feature_dim]` target vectors.
    Features(&'a Tensor),
}

/// Mean over masked patches of the per-patch reconstruction error:
/// Chamfer for coordinates, cosine distance for features.
pub fn reconstruction_loss(tape: &mut Tape, pred: Var, gt: ReconGroundTruth, mode: ReconTarget) -> Result<Var> {
    let rows = tape.value(pred).rows();
    match (gt, mode) {
        (ReconGroundTruth::Coordinates { patches, masked }, ReconTarget::Coordinates) => {
            let k = patches.k;
            if masked.len() != rows || tape.value(pred).cols() != k * 3 || rows == 0 {
                return Err(Error::contract(format!(
                    "reconstruction_loss: prediction {:?} for {} masked patches of {} points",
                    tape.shape(pred),
                    masked.len(),
                    k
                )));
            }
            let mut total: Option<Var> = None;
            for (row, &patch) in masked.iter().enumerate() {
                let p = tape.gather_rows(pred, &[row])?;
                let p = tape.reshape(p, &[k, 3])?;
                let g = tape.constant(points_tensor(patches.patch(patch)))?;
                let c = tape.chamfer(p, g)?;
                total = Some(match total {
                    Some(t) => tape.add(t, c)?,
                    None => c,
                });
            }
            Ok(tape.scale(total.expect("rows > 0"), 1.0 / rows as f64)?)
        }
        (ReconGroundTruth::Features(target), ReconTarget::ExternalFeatures) => {
            if target.shape() != tape.shape(pred) {
                return Err(Error::contract(format!(
                    "reconstruction_loss: prediction {:?} vs target {:?}",
                    tape.shape(pred),
                    target.shape()
                )));
            }
            let t = tape.constant(target.clone())?;
            let d = tape.cosine_distance(pred, t)?;
            Ok(tape.mean(d)?)
        }
        _ => Err(Error::contract("reconstruction_loss: ground truth does not match target mode")),
    }
}

/// Student dataflow for one masking per the configured pipeline. Returns the
/// reconstruction-head output for the masked patches and, for the regressor
/// pipeline, the predicted masked tokens.
pub fn masked_forward(f: &mut Forward, patches: &PatchSet, plan: &MaskPlan) -> Result<(Var, Option<Var>)> {
    let embedded = f.embed_patches(patches)?;
    let masked = f.select(&embedded, &plan.masked)?;
    let (decoded, predicted) = match f.config.pipeline {
        Pipeline::Regress => {
            let visible = f.select(&embedded, &plan.visible)?;
            let encoded = f.encode(&visible)?;
            let predicted = f.regress(&encoded, masked.positions)?;
            (f.decode(&predicted)?, Some(predicted.tokens))
        }
        Pipeline::DecoderOnly => {
            let visible = f.select(&embedded, &plan.visible)?;
            let encoded = f.encode(&visible)?;
            (f.decode_with_mask_tokens(&encoded, masked.positions)?, None)
        }
        Pipeline::EncoderOnly => (f.encode_with_mask_tokens(&embedded, &plan.masked)?, None),
    };
    Ok((f.reconstruct_head(&decoded)?, predicted))
}

/// Reconstructed masked patches in world coordinates, one `[k, 3]` block per
/// masked patch, each predicted offset placed at its patch center.
pub fn reconstruct_masked(state: &ModelState, patches: &PatchSet, plan: &MaskPlan) -> Result<Vec<Vec<Point>>> {
    if state.config.recon_target != ReconTarget::Coordinates {
        return Err(Error::contract("reconstruction export needs a coordinate reconstruction head"));
    }
    let mut tape = Tape::with_precision(state.config.precision);
    let mut f = Forward::new(&mut tape, Binder::new(&state.params, BindMode::Constant), &state.layout, &state.config);
    let (out, _) = masked_forward(&mut f, patches, plan)?;
    let out = tape.value(out);
    Ok(plan
        .masked
        .iter()
        .enumerate()
        .map(|(row, &patch)| {
            let c = patches.centers[patch];
            out.row(row).chunks(3).map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]).collect()
        })
        .collect())
}

/// Mean masked-patch Chamfer over `clouds` with a fixed patching and masking
/// per cloud index.
pub fn eval_reconstruction(state: &ModelState, clouds: &[PointCloud], seed: u64) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::contract("eval_reconstruction needs at least one cloud"));
    }
    let cfg = &state.config;
    let mut total = 0.0;
    for (i, cloud) in clouds.iter().enumerate() {
        let patches = make_patches(cloud, cfg.patch_count, cfg.neighbors, seed::derive(seed, Stream::Patch, i as u64))?;
        let plan = sample_mask(cfg.patch_count, cfg.mask_ratio, seed::derive(seed, Stream::Mask, i as u64))?;
        let recon = reconstruct_masked(state, &patches, &plan)?;
        for (pts, &p) in recon.iter().zip(&plan.masked) {
            let c = patches.centers[p];
            let truth: Vec<Point> = patches.patch(p).iter().map(|q| [q[0] + c[0], q[1] + c[1], q[2] + c[2]]).collect();
            total += chamfer_l2(pts, &truth)? / plan.masked.len() as f64;
        }
    }
    Ok(total / clouds.len() as f64)
}

/// Teacher encoding of all patches, masked rows extracted. Runs on its own
/// tape, so the result carries no gradient path to any parameter.
pub fn teacher_targets(state: &ModelState, patches: &PatchSet, plan: &MaskPlan) -> Result<Tensor> {
    if patches.len() != plan.len() {
        return Err(Error::contract(format!("teacher_targets: {} patches for a plan over {}", patches.len(), plan.len())));
    }
    let mut tape = Tape::with_precision(state.config.precision);
    let mut f = Forward::teacher(&mut tape, state);
    let all = f.embed_patches(patches)?;
    let encoded = f.encode(&all)?;
    let rows = tape.gather_rows(encoded.tokens, &plan.masked)?;
    Ok(tape.value(rows).clone())
}

/// Objective tying predicted masked tokens to teacher tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignTarget {
    /// Mean cosine distance.
    #[default]
    Cosine,
    /// Mean squared error over all `S_m · d` entries.
    Mse,
    /// Cross-entropy of each prediction against all teacher tokens of the
    /// cloud, the matching row being the positive.
    InfoNce { temperature: f64 },
    /// SimCLR loss over the `2·S_m` normalized predictions and targets, self
    /// similarity excluded.
    NtXent { temperature: f64 },
}

impl AlignTarget {
    pub const DEFAULT_TEMPERATURE: f64 = 0.1;

    pub fn name(&self) -> &'static str {
        match self {
            AlignTarget::Cosine => "cosine",
            AlignTarget::Mse => "mse",
            AlignTarget::InfoNce { .. } => "info_nce",
            AlignTarget::NtXent { .. } => "nt_xent",
        }
    }

    pub fn parse(s: &str) -> Option<AlignTarget> {
        let t = Self::DEFAULT_TEMPERATURE;
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cosine" => Some(AlignTarget::Cosine),
            "mse" => Some(AlignTarget::Mse),
            "info_nce" | "infonce" => Some(AlignTarget::InfoNce { temperature: t }),
            "nt_xent" | "ntxent" => Some(AlignTarget::NtXent { temperature: t }),
            _ => None,
        }
    }
}

/// Added to self-similarity logits in NT-Xent.
const SELF_MASK: f64 = -1e9;

/// Alignment loss between predictions `[S_m, d]` on the tape and teacher
/// targets, which enter as constants (stop-gradient).
pub fn alignment_loss(tape: &mut Tape, pred: Var, target: &Tensor, kind: AlignTarget) -> Result<Var> {
    if tape.shape(pred) != target.shape() || target.rows() == 0 {
        return Err(Error::contract(format!("alignment_loss: prediction {:?} vs target {:?}", tape.shape(pred), target.shape())));
    }
    let t = tape.constant(target.clone())?;
    let n = target.rows();
    let loss = match kind {
        AlignTarget::Cosine => {
            let d = tape.cosine_distance(pred, t)?;
            tape.mean(d)?
        }
        AlignTarget::Mse => {
            let diff = tape.sub(pred, t)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)?
        }
        AlignTarget::InfoNce { temperature } => {
            check_temperature(temperature)?;
            let p = tape.l2_normalize(pred)?;
            let q = tape.l2_normalize(t)?;
            let logits = tape.matmul_nt(p, q)?;
            let logits = tape.scale(logits, 1.0 / temperature)?;
            let labels: Vec<usize> = (0..n).collect();
            tape.cross_entropy(logits, &labels)?
        }
        AlignTarget::NtXent { temperature } => {
            check_temperature(temperature)?;
            let p = tape.l2_normalize(pred)?;
            let q = tape.l2_normalize(t)?;
            let z = tape.concat_rows(&[p, q])?;
            let sim = tape.matmul_nt(z, z)?;
            let sim = tape.scale(sim, 1.0 / temperature)?;
            let mut mask = Tensor::zeros(&[2 * n, 2 * n]);
            for i in 0..2 * n {
                mask.data_mut()[i * 2 * n + i] = SELF_MASK;
            }
            let mask = tape.constant(mask)?;
            let logits = tape.add(sim, mask)?;
            let labels: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
            tape.cross_entropy(logits, &labels)?
        }
    };
    Ok(loss)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config("pretrain.align_target.temperature", "must be positive"))
    }
}
