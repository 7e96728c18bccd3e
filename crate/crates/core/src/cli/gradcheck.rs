//! Finite-difference checks over every differentiable op, block type, head
//! and loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{make_patches, PointCloud};
use crate::model::{
    BindMode, Binder, ClassifierHead, CrossBlock, HeadMode, HeadSpec, ModelConfig, ModelState, ParamStore, PatchEmbed,
    PosEmbed, Protocol, SelfBlock,
};
use crate::numerics::{relative_error, GradCheck, GradCheckReport, NumericsError, OpKind, ParamId, Precision, Tape, Tensor, Var};
use crate::pretrain::{alignment_loss, masked_forward, reconstruction_loss, sample_mask, teacher_targets, AlignTarget, ReconGroundTruth};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub kind: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
    pub passed: bool,
}

type R<T> = std::result::Result<T, NumericsError>;

/// Central differences over the parameters of `store` (all of them, or a
/// sample of `check.max_coords` scalars).
pub fn param_grad_check<F>(store: &ParamStore, check: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut Binder) -> R<Var>,
{
    let mut tape = Tape::with_precision(Precision::F64);
    if let Some(kind) = check.fault {
        tape.inject_fault(kind);
    }
    let mut binder = Binder::new(store, BindMode::Trainable);
    let loss = f(&mut tape, &mut binder)?;
    let grads = tape.backward(loss)?;

    let sizes: Vec<usize> = store.entries().iter().map(|e| e.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = match check.max_coords {
        Some(m) if m < total => {
            let mut picked = sample(&mut ChaCha8Rng::seed_from_u64(check.seed), total, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };
    let eval = |s: &ParamStore| -> R<f64> {
        let mut t = Tape::with_precision(Precision::F64);
        let mut b = Binder::new(s, BindMode::Constant);
        let l = f(&mut t, &mut b)?;
        Ok(t.value(l).item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for flat in coords {
        let (mut which, mut offset) = (0, flat);
        while offset >= sizes[which] {
            offset -= sizes[which];
            which += 1;
        }
        let id = ParamId(which);
        let orig = work.get(id).data()[offset];
        work.get_mut(id).data_mut()[offset] = orig + check.eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[offset] = orig - check.eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[offset] = orig;
        let numeric = (plus - minus) / (2.0 * check.eps);
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[offset]);
        let err = relative_error(analytic, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((which, offset));
        }
    }
    Ok(report)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Weighted sum against a fixed random tensor. The small weights keep
/// roundoff on exactly-zero gradients (key biases) well under the floor.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> R<Var> {
    let w = tape.constant(random(tape.shape(y), seed).map(|v| 0.1 * v))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpCase = (OpKind, Vec<Tensor>, fn(&mut Tape, &[Var]) -> R<Var>);

fn op_cases() -> Vec<OpCase> {
    use OpKind as K;
    vec![
        (K::MatMul, vec![random(&[3, 4], 1), random(&[4, 5], 2)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 100)
        }),
        (K::MatMulNt, vec![random(&[3, 4], 3), random(&[5, 4], 4)], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            probe(t, y, 101)
        }),
        (K::Transpose, vec![random(&[3, 4], 5)], |t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y, 102)
        }),
        (K::Add, vec![random(&[2, 3], 6), random(&[2, 3], 7)], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 103)
        }),
        (K::Sub, vec![random(&[2, 3], 8), random(&[2, 3], 9)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 104)
        }),
        (K::Mul, vec![random(&[2, 3], 10), random(&[2, 3], 11)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 105)
        }),
        (K::AddRow, vec![random(&[3, 4], 12), random(&[4], 13)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            probe(t, y, 106)
        }),
        (K::MulRow, vec![random(&[3, 4], 14), random(&[4], 15)], |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            probe(t, y, 107)
        }),
        (K::Scale, vec![random(&[3, 3], 16)], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            probe(t, y, 108)
        }),
        (K::AddScalar, vec![random(&[3, 3], 17)], |t, v| {
            let y = t.add_scalar(v[0], 0.4)?;
            let y = t.mul(y, y)?;
            probe(t, y, 109)
        }),
        (K::Gelu, vec![random(&[3, 4], 18)], |t, v| {
            let y = t.gelu(v[0])?;
            probe(t, y, 110)
        }),
        (K::Relu, vec![random(&[3, 4], 19)], |t, v| {
            let y = t.relu(v[0])?;
            probe(t, y, 111)
        }),
        (K::Softmax, vec![random(&[3, 5], 20)], |t, v| {
            let y = t.softmax(v[0])?;
            probe(t, y, 112)
        }),
        (K::LayerNorm, vec![random(&[3, 6], 21), random(&[6], 22), random(&[6], 23)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 113)
        }),
        (K::BatchNorm, vec![random(&[5, 4], 24), random(&[4], 25), random(&[4], 26)], |t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 114)
        }),
        (K::SliceCols, vec![random(&[3, 6], 27)], |t, v| {
            let y = t.slice_cols(v[0], 1, 4)?;
            probe(t, y, 115)
        }),
        (K::ConcatCols, vec![random(&[3, 2], 28), random(&[3, 4], 29)], |t, v| {
            let y = t.concat_cols(&[v[1], v[0]])?;
            probe(t, y, 116)
        }),
        (K::GatherRows, vec![random(&[4, 3], 30)], |t, v| {
            let y = t.gather_rows(v[0], &[3, 1, 1, 0])?;
            probe(t, y, 117)
        }),
        (K::ConcatRows, vec![random(&[2, 3], 31), random(&[3, 3], 32)], |t, v| {
            let y = t.concat_rows(&[v[1], v[0]])?;
            probe(t, y, 118)
        }),
        (K::SegmentMax, vec![random(&[6, 3], 33)], |t, v| {
            let y = t.segment_max(v[0], 3)?;
            probe(t, y, 119)
        }),
        (K::SegmentMean, vec![random(&[6, 3], 34)], |t, v| {
            let y = t.segment_mean(v[0], 2)?;
            probe(t, y, 120)
        }),
        (K::Sum, vec![random(&[3, 3], 35)], |t, v| {
            let y = t.gelu(v[0])?;
            t.sum(y)
        }),
        (K::Mean, vec![random(&[3, 3], 36)], |t, v| {
            let y = t.gelu(v[0])?;
            t.mean(y)
        }),
        (K::Reshape, vec![random(&[2, 6], 37)], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            probe(t, y, 121)
        }),
        (K::CosineDistance, vec![random(&[4, 5], 38), random(&[4, 5], 39)], |t, v| {
            let y = t.cosine_distance(v[0], v[1])?;
            probe(t, y, 122)
        }),
        (K::L2Normalize, vec![random(&[3, 4], 40)], |t, v| {
            let y = t.l2_normalize(v[0])?;
            probe(t, y, 123)
        }),
        (K::Chamfer, vec![random(&[7, 3], 41), random(&[5, 3], 42)], |t, v| t.chamfer(v[0], v[1])),
        (K::CrossEntropy, vec![random(&[4, 3], 43)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    ]
}

fn row(name: impl Into<String>, kind: &'static str, r: GradCheckReport) -> CheckRow {
    CheckRow { name: name.into(), kind, max_rel_err: r.max_rel_err, coords: r.coords_checked, passed: r.max_rel_err < TOLERANCE }
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        max_rel_err: a.max_rel_err.max(b.max_rel_err),
        coords_checked: a.coords_checked + b.coords_checked,
        worst: if b.max_rel_err > a.max_rel_err { b.worst } else { a.worst },
    }
}

/// Stop-gradient cannot be checked by differences; its contract is an
/// identity forward and an exactly zero backward.
fn stop_gradient_row(fault: Option<OpKind>) -> Result<CheckRow> {
    let mut tape = Tape::with_precision(Precision::F64);
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let x = tape.input(random(&[3, 3], 44))?;
    let s = tape.stop_gradient(x)?;
    let y = probe(&mut tape, s, 124)?;
    let g = tape.backward(y)?;
    let leak = g.wrt(x).map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let identity = tape.value(s).max_abs_diff(tape.value(x));
    let err = leak.max(identity);
    Ok(CheckRow { name: OpKind::StopGradient.name().into(), kind: "op", max_rel_err: err, coords: 9, passed: err == 0.0 })
}

fn block_rows(check: &GradCheck) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d, h) = (8, 2);
    let mut rows = Vec::new();

    let mut store = ParamStore::new();
    let embed = PatchEmbed::new(&mut store, &mut rng, d);
    let points = random(&[8, 3], 50);
    let pf = |t: &mut Tape, p: &mut Binder, pts: Var| -> R<Var> {
        let y = embed.forward(t, p, pts, 4)?;
        probe(t, y, 200)
    };
    let a = param_grad_check(&store, check, |t, p| {
        let x = t.constant(points.clone())?;
        pf(t, p, x)
    })?;
    let b = check.run(|t, v| pf(t, &mut Binder::new(&store, BindMode::Constant), v[0]), std::slice::from_ref(&points))?;
    rows.push(row("patch_embed", "block", merge(a, b)));

    let mut store = ParamStore::new();
    let pos = PosEmbed::new(&mut store, &mut rng, d);
    let centers = random(&[4, 3], 51);
    let r = param_grad_check(&store, check, |t, p| {
        let c = t.constant(centers.clone())?;
        let y = pos.forward(t, p, c)?;
        probe(t, y, 201)
    })?;
    rows.push(row("pos_embed", "block", r));

    for (name, seed) in [("encoder_block", 52), ("decoder_block", 53)] {
        let mut store = ParamStore::new();
        let block = SelfBlock::new(&mut store, &mut rng, name, d, h);
        let x = random(&[5, d], seed);
        let f = |t: &mut Tape, p: &mut Binder, x: Var| -> R<Var> {
            let y = block.forward(t, p, x)?;
            probe(t, y, 202)
        };
        let a = param_grad_check(&store, check, |t, p| {
            let v = t.constant(x.clone())?;
            f(t, p, v)
        })?;
        let b = check.run(|t, v| f(t, &mut Binder::new(&store, BindMode::Constant), v[0]), std::slice::from_ref(&x))?;
        rows.push(row(name, "block", merge(a, b)));
    }

    let mut store = ParamStore::new();
    let cross = CrossBlock::new(&mut store, &mut rng, "regressor", d, h);
    let (q, ctx) = (random(&[3, d], 54), random(&[5, d], 55));
    let f = |t: &mut Tape, p: &mut Binder, q: Var, c: Var| -> R<Var> {
        let y = cross.forward(t, p, q, c)?;
        probe(t, y, 203)
    };
    let a = param_grad_check(&store, check, |t, p| {
        let (qv, cv) = (t.constant(q.clone())?, t.constant(ctx.clone())?);
        f(t, p, qv, cv)
    })?;
    let b = check.run(|t, v| f(t, &mut Binder::new(&store, BindMode::Constant), v[0], v[1]), &[q.clone(), ctx.clone()])?;
    rows.push(row("regressor_block", "block", merge(a, b)));

    for protocol in [Protocol::Linear, Protocol::Mlp3] {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, &mut rng, HeadSpec { protocol, in_dim: 6, n_classes: 3, hidden: 5 });
        let feats = random(&[4, 6], 56);
        let f = |t: &mut Tape, p: &mut Binder, x: Var| -> R<Var> {
            // a fresh generator per evaluation fixes the dropout mask
            let mut drop = ChaCha8Rng::seed_from_u64(9);
            let (logits, _) = head.forward(t, p, x, HeadMode::Train(&mut drop))?;
            t.cross_entropy(logits, &[0, 1, 2, 1])
        };
        let a = param_grad_check(&store, check, |t, p| {
            let x = t.constant(feats.clone())?;
            f(t, p, x)
        })?;
        let b = check.run(|t, v| f(t, &mut Binder::new(&store, BindMode::Constant), v[0]), std::slice::from_ref(&feats))?;
        rows.push(row(format!("head_{}", protocol.name().to_lowercase()), "block", merge(a, b)));
    }
    Ok(rows)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        enc_depth: 1,
        reg_depth: 1,
        dec_depth: 1,
        patch_count: 6,
        neighbors: 4,
        mask_ratio: 0.5,
        head_hidden: 4,
        ..ModelConfig::desk()
    }
}

fn test_cloud() -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    PointCloud::new((0..48).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect())
        .expect("finite")
}

fn loss_rows(check: &GradCheck) -> Result<Vec<CheckRow>> {
    let cfg = tiny_model();
    let patches = make_patches(&test_cloud(), cfg.patch_count, cfg.neighbors, 61)?;
    let plan = sample_mask(cfg.patch_count, cfg.mask_ratio, 62)?;
    let mut rows = Vec::new();

    let pred = random(&[plan.masked.len(), cfg.neighbors * 3], 63);
    let r = check.run(
        |t, v| {
            let gt = ReconGroundTruth::Coordinates { patches: &patches, masked: &plan.masked };
            reconstruction_loss(t, v[0], gt, cfg.recon_target).map_err(into_numerics)
        },
        std::slice::from_ref(&pred),
    )?;
    rows.push(row("reconstruction_loss", "loss", r));

    let target = random(&[4, 6], 64);
    let pred = random(&[4, 6], 65);
    let t = AlignTarget::DEFAULT_TEMPERATURE;
    for kind in [AlignTarget::Cosine, AlignTarget::Mse, AlignTarget::InfoNce { temperature: t }, AlignTarget::NtXent { temperature: t }] {
        let r = check.run(|tp, v| alignment_loss(tp, v[0], &target, kind).map_err(into_numerics), std::slice::from_ref(&pred))?;
        rows.push(row(format!("alignment_{}", kind.name()), "loss", r));
    }
    Ok(rows)
}

/// Full student pipeline `L_rec + L_align` over a sample of parameters.
fn pipeline_row(check: &GradCheck) -> Result<CheckRow> {
    let cfg = tiny_model();
    let state = ModelState::new(cfg.clone(), 70)?;
    let patches = make_patches(&test_cloud(), cfg.patch_count, cfg.neighbors, 71)?;
    let plan = sample_mask(cfg.patch_count, cfg.mask_ratio, 72)?;
    let target = teacher_targets(&state, &patches, &plan)?;
    let store = state.params.clone();
    let sampled = GradCheck { max_coords: Some(check.max_coords.unwrap_or(150)), seed: 73, ..check.clone() };
    let r = param_grad_check(&store, &sampled, |t, p| {
        let mut f = crate::model::Forward::new(t, p.take(), &state.layout, &state.config);
        let (out, predicted) = masked_forward(&mut f, &patches, &plan).map_err(into_numerics)?;
        let gt = ReconGroundTruth::Coordinates { patches: &patches, masked: &plan.masked };
        let rec = reconstruction_loss(t, out, gt, cfg.recon_target).map_err(into_numerics)?;
        let pred = predicted.expect("regressor pipeline");
        let align = alignment_loss(t, pred, &target, AlignTarget::Cosine).map_err(into_numerics)?;
        t.add(rec, align)
    })?;
    Ok(row("pipeline", "model", r))
}

fn into_numerics(e: crate::error::Error) -> NumericsError {
    match e {
        crate::error::Error::Numerics(n) => n,
        other => NumericsError::Contract(other.to_string()),
    }
}

/// Every check at step `eps`, optionally with one op's backward sign
/// flipped.
pub fn run_suite(eps: f64, fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut check = GradCheck::with_eps(eps);
    check.fault = fault;
    let mut rows = Vec::new();
    for (kind, inputs, f) in op_cases() {
        rows.push(row(kind.name(), "op", check.run(f, &inputs)?));
    }
    rows.push(stop_gradient_row(fault)?);
    rows.extend(block_rows(&check)?);
    rows.extend(loss_rows(&check)?);
    rows.push(pipeline_row(&check)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_op_and_passes_clean() {
        let rows = run_suite(1e-5, None).unwrap();
        for kind in OpKind::ALL.iter().filter(|k| **k != OpKind::Leaf) {
            assert!(rows.iter().any(|r| r.name == kind.name() && r.kind == "op"), "{}", kind.name());
        }
        for name in ["encoder_block", "decoder_block", "regressor_block", "head_mlp3", "alignment_nt_xent", "pipeline"] {
            assert!(rows.iter().any(|r| r.name == name), "{name}");
        }
        let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| (&r.name, r.max_rel_err)).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn injected_fault_fails_its_row() {
        for kind in [OpKind::Softmax, OpKind::Chamfer, OpKind::StopGradient, OpKind::SegmentMax] {
            let rows = run_suite(1e-5, Some(kind)).unwrap();
            let own = rows.iter().find(|r| r.name == kind.name()).unwrap();
            assert!(!own.passed, "{}", kind.name());
            assert!(rows.iter().any(|r| r.passed));
        }
    }
}
