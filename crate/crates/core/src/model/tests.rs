use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{make_patches, PointCloud};

fn tiny() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        enc_depth: 1,
        reg_depth: 2,
        dec_depth: 1,
        patch_count: 8,
        neighbors: 8,
        mask_ratio: 0.5,
        head_hidden: 8,
        ..ModelConfig::desk()
    }
}

fn cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    PointCloud::new(pts).unwrap()
}

fn patches(cfg: &ModelConfig, seed: u64) -> PatchSet {
    make_patches(&cloud(seed, 128), cfg.patch_count, cfg.neighbors, seed).unwrap()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn embedding_shape_and_within_patch_order_invariance() {
    let cfg = tiny();
    let state = ModelState::new(cfg.clone(), 1).unwrap();
    let ps = patches(&cfg, 2);
    let mut shuffled = ps.clone();
    for i in 0..ps.len() {
        shuffled.patches[i * ps.k..(i + 1) * ps.k].reverse();
    }
    let mut tape = Tape::new();
    let mut f = Forward::student(&mut tape, &state);
    let a = f.embed_patches(&ps).unwrap();
    let b = f.embed_patches(&shuffled).unwrap();
    assert_eq!(tape.shape(a.tokens), [cfg.patch_count, cfg.dim]);
    assert!(tape.value(a.tokens).max_abs_diff(tape.value(b.tokens)) < 1e-12);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = tiny();
    let state = ModelState::new(cfg.clone(), 3).unwrap();
    let ps = patches(&cfg, 4);
    let perm: Vec<usize> = (0..cfg.patch_count).rev().collect();
    let mut tape = Tape::new();
    let mut f = Forward::student(&mut tape, &state);
    let emb = f.embed_patches(&ps).unwrap();
    let permuted = f.select(&emb, &perm).unwrap();
    let a = f.encode(&emb).unwrap();
    let b = f.encode(&permuted).unwrap();
    let a_rows = rows_of(tape.value(a.tokens));
    let b_rows = rows_of(tape.value(b.tokens));
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in b_rows[i].iter().zip(&a_rows[p]) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn regressor_ignores_visible_order_and_queries_are_independent() {
    let cfg = ModelConfig { reg_depth: 1, ..tiny() };
    let state = ModelState::new(cfg.clone(), 5).unwrap();
    let ps = patches(&cfg, 6);
    let mut tape = Tape::new();
    let mut f = Forward::student(&mut tape, &state);
    let emb = f.embed_patches(&ps).unwrap();
    let vis = f.select(&emb, &[0, 1, 2, 3]).unwrap();
    let vis_rev = f.select(&emb, &[3, 2, 1, 0]).unwrap();
    let enc = f.encode(&vis).unwrap();
    let enc_rev = f.encode(&vis_rev).unwrap();
    let masked = f.select(&emb, &[4, 5, 6, 7]).unwrap();
    let one = f.select(&emb, &[6]).unwrap();
    let a = f.regress(&enc, masked.positions).unwrap();
    let b = f.regress(&enc_rev, masked.positions).unwrap();
    let c = f.regress(&enc, one.positions).unwrap();
    assert_eq!(tape.shape(a.tokens), [4, cfg.dim]);
    assert!(tape.value(a.tokens).max_abs_diff(tape.value(b.tokens)) < 1e-10);
    // without self-attention among queries, each prediction depends only on
    // its own position and the visible context
    let row = tape.value(a.tokens).row(2).to_vec();
    for (x, y) in row.iter().zip(tape.value(c.tokens).row(0)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn kv_modes_differ_only_beyond_the_first_block() {
    let ps = patches(&tiny(), 7);
    let run = |kv: KvMode, depth: usize| {
        let cfg = ModelConfig { kv_mode: kv, reg_depth: depth, ..tiny() };
        let state = ModelState::new(cfg, 8).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::student(&mut tape, &state);
        let emb = f.embed_patches(&ps).unwrap();
        let vis = f.select(&emb, &[0, 2, 4, 6]).unwrap();
        let enc = f.encode(&vis).unwrap();
        let masked = f.select(&emb, &[1, 3, 5, 7]).unwrap();
        let out = f.regress(&enc, masked.positions).unwrap();
        tape.value(out.tokens).clone()
    };
    assert!(run(KvMode::PreviousLayer, 1).max_abs_diff(&run(KvMode::VisibleAlways, 1)) < 1e-15);
    assert!(run(KvMode::PreviousLayer, 2).max_abs_diff(&run(KvMode::VisibleAlways, 2)) > 1e-6);
}

#[test]
fn regress_rejects_empty_masks_and_wrong_roles() {
    let cfg = tiny();
    let state = ModelState::new(cfg.clone(), 9).unwrap();
    let ps = patches(&cfg, 9);
    let mut tape = Tape::new();
    let mut f = Forward::student(&mut tape, &state);
    let emb = f.embed_patches(&ps).unwrap();
    let enc = f.encode(&emb).unwrap();
    let empty = f.tape.constant(Tensor::zeros(&[0, 3])).unwrap();
    assert!(f.regress(&enc, empty).is_err());
    assert!(f.regress(&emb, emb.positions).is_err());
    assert!(f.decode(&enc).is_err());
}

#[test]
fn zero_depth_decoder_is_identity() {
    let cfg = ModelConfig { dec_depth: 0, ..tiny() };
    let state = ModelState::new(cfg.clone(), 10).unwrap();
    let ps = patches(&cfg, 10);
    let mut tape = Tape::new();
    let mut f = Forward::student(&mut tape, &state);
    let emb = f.embed_patches(&ps).unwrap();
    let vis = f.select(&emb, &[0, 1, 2, 3]).unwrap();
    let enc = f.encode(&vis).unwrap();
    let masked = f.select(&emb, &[4, 5, 6, 7]).unwrap();
    let pred = f.regress(&enc, masked.positions).unwrap();
    let dec = f.decode(&pred).unwrap();
    assert_eq!(dec.tokens, pred.tokens);
    assert_eq!(dec.role, Role::DecodedMasked);
}

#[test]
fn zero_recon_head_predicts_origin() {
    let cfg = tiny();
    let mut state = ModelState::new(cfg.clone(), 11).unwrap();
    let w = state.layout.recon.w;
    *state.params.get_mut(w) = Tensor::zeros(state.params.get(w).shape());
    let ps = patches(&cfg, 11);
    let mut tape = Tape::new();
    let mut f = Forward::student(&mut tape, &state);
    let emb = f.embed_patches(&ps).unwrap();
    let vis = f.select(&emb, &[0, 1, 2, 3]).unwrap();
    let enc = f.encode(&vis).unwrap();
    let masked = f.select(&emb, &[4, 5, 6, 7]).unwrap();
    let pred = f.regress(&enc, masked.positions).unwrap();
    let dec = f.decode(&pred).unwrap();
    let out = f.reconstruct_head(&dec).unwrap();
    assert_eq!(tape.shape(out), [4, cfg.neighbors * 3]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    // with every prediction at the origin, Chamfer reduces to the mean
    // squared norm of the target plus zero
    let target = ps.patch(4).to_vec();
    let pred_pts = tape.value(out).row(0).chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let oracle: f64 = target.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / target.len() as f64;
    let got = crate::geometry::chamfer_l2(&pred_pts, &target).unwrap();
    assert!((got - oracle).abs() < 1e-12);
}

#[test]
fn pool_concat_matches_oracle() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0], vec![-1.0, 0.0]]).unwrap()).unwrap();
    let y = pool_concat(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0, 1.0, 2.0 / 3.0]);
    let empty = tape.constant(Tensor::zeros(&[0, 2])).unwrap();
    assert!(pool_concat(&mut tape, empty).is_err());
}

#[test]
fn teacher_mirrors_encoding_path_and_ema_bounds() {
    let mut state = ModelState::new(tiny(), 12).unwrap();
    assert!(state.teacher_congruent());
    assert_eq!(state.teacher.len(), state.layout.encoding_path_len);
    let before = state.teacher_checksum();
    state.params.get_mut(ParamId(0)).data_mut()[0] += 1.0;
    state.ema_update(1.0).unwrap();
    assert_eq!(state.teacher_checksum(), before);
    state.ema_update(0.0).unwrap();
    assert_eq!(state.teacher.get(ParamId(0)), state.params.get(ParamId(0)));
    assert!(state.ema_update(1.5).is_err());
    assert!(state.ema_update(-0.1).is_err());
}

#[test]
fn teacher_forward_has_no_parameter_gradients() {
    let cfg = tiny();
    let state = ModelState::new(cfg.clone(), 13).unwrap();
    let ps = patches(&cfg, 13);
    let mut tape = Tape::new();
    let mut f = Forward::teacher(&mut tape, &state);
    let emb = f.embed_patches(&ps).unwrap();
    let enc = f.encode(&emb).unwrap();
    let loss = tape.sum(enc.tokens).unwrap();
    assert!(tape.backward(loss).unwrap().params().is_empty());
}

#[test]
fn frozen_backbone_gets_zero_gradient_under_linear_probe() {
    let cfg = tiny();
    let mut state = ModelState::new(cfg.clone(), 14).unwrap();
    let spec = HeadSpec { protocol: Protocol::Linear, in_dim: 2 * cfg.dim, n_classes: 3, hidden: cfg.head_hidden };
    state.attach_head(spec, 15);
    let ps = patches(&cfg, 14);
    let mut tape = Tape::new();
    let binder = Binder::new(&state.params, BindMode::Trainable).freeze_prefix(state.layout.backbone_len);
    let mut f = Forward::new(&mut tape, binder, &state.layout, &state.config);
    let emb = f.embed_patches(&ps).unwrap();
    let enc = f.encode(&emb).unwrap();
    let feats = pool_concat(f.tape, enc.tokens).unwrap();
    let head = state.head.as_ref().unwrap();
    let (logits, _) = head.forward(f.tape, &mut f.params, feats, HeadMode::Eval).unwrap();
    let loss = tape.cross_entropy(logits, &[1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    for id in 0..state.layout.backbone_len {
        assert!(grads.param(ParamId(id)).is_none());
    }
    assert!(grads.params().keys().any(|id| id.0 >= state.layout.backbone_len));
}

#[test]
fn head_widths_and_eval_determinism() {
    let cfg = tiny();
    for protocol in Protocol::ALL {
        let mut state = ModelState::new(cfg.clone(), 16).unwrap();
        state.attach_head(HeadSpec { protocol, in_dim: 2 * cfg.dim, n_classes: 5, hidden: 8 }, 17);
        let feats = Tensor::new(vec![3, 2 * cfg.dim], (0..6 * cfg.dim).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = |train: bool| {
            let mut tape = Tape::new();
            let mut p = Binder::new(&state.params, BindMode::Trainable);
            let x = tape.constant(feats.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mode = if train { HeadMode::Train(&mut rng) } else { HeadMode::Eval };
            let (y, obs) = state.head.as_ref().unwrap().forward(&mut tape, &mut p, x, mode).unwrap();
            (tape.value(y).clone(), obs.len())
        };
        let (a, _) = run(false);
        let (b, _) = run(false);
        assert_eq!(a, b);
        assert_eq!(a.shape(), [3, 5]);
        let (_, observed) = run(true);
        assert_eq!(observed, if protocol == Protocol::Linear { 0 } else { 2 });
    }
}

#[test]
fn attach_head_replaces_previous_head() {
    let mut state = ModelState::new(tiny(), 18).unwrap();
    let backbone = state.backbone_checksum();
    state.attach_head(HeadSpec { protocol: Protocol::Full, in_dim: 32, n_classes: 4, hidden: 8 }, 1);
    let with_mlp = state.params.len();
    state.attach_head(HeadSpec { protocol: Protocol::Linear, in_dim: 32, n_classes: 4, hidden: 8 }, 1);
    assert_eq!(state.params.len(), state.layout.backbone_len + 2);
    assert!(with_mlp > state.params.len());
    assert_eq!(state.backbone_checksum(), backbone);
}

/// Reconstruction-plus-alignment-style scalar of the full student path,
/// used to check analytic parameter gradients against central differences.
fn pipeline_loss(state: &ModelState, ps: &PatchSet, tape: &mut Tape) -> Var {
    let mut f = Forward::student(tape, state);
    let emb = f.embed_patches(ps).unwrap();
    let vis = f.select(&emb, &[0, 2, 4, 6]).unwrap();
    let masked = f.select(&emb, &[1, 3, 5, 7]).unwrap();
    let enc = f.encode(&vis).unwrap();
    let pred = f.regress(&enc, masked.positions).unwrap();
    let dec = f.decode(&pred).unwrap();
    let out = f.reconstruct_head(&dec).unwrap();
    let k = ps.k;
    let mut total = None;
    for (row, &patch) in [1usize, 3, 5, 7].iter().enumerate() {
        let r = f.tape.gather_rows(out, &[row]).unwrap();
        let r = f.tape.reshape(r, &[k, 3]).unwrap();
        let gt = f.tape.constant(points_tensor(ps.patch(patch))).unwrap();
        let c = f.tape.chamfer(r, gt).unwrap();
        total = Some(match total {
            None => c,
            Some(t) => f.tape.add(t, c).unwrap(),
        });
    }
    let tokens = f.tape.sum(pred.tokens).unwrap();
    let tokens = f.tape.scale(tokens, 1e-2).unwrap();
    f.tape.add(total.unwrap(), tokens).unwrap()
}

#[test]
fn end_to_end_parameter_gradients_match_finite_differences() {
    let cfg = ModelConfig { dim: 8, heads: 2, neighbors: 4, ..tiny() };
    let mut state = ModelState::new(cfg.clone(), 19).unwrap();
    let ps = make_patches(&cloud(20, 64), cfg.patch_count, cfg.neighbors, 20).unwrap();
    let mut tape = Tape::new();
    let loss = pipeline_loss(&state, &ps, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let id = ParamId(rng.random_range(0..state.params.len()));
        let j = rng.random_range(0..state.params.get(id).len());
        let analytic = grads.param_or_zero(id, state.params.get(id).shape()).data()[j];
        let base = state.params.get(id).data()[j];
        let mut eval = |v: f64| {
            state.params.get_mut(id).data_mut()[j] = v;
            let mut t = Tape::new();
            let l = pipeline_loss(&state, &ps, &mut t);
            t.value(l).item()
        };
        let numeric = (eval(base + eps) - eval(base - eps)) / (2.0 * eps);
        state.params.get_mut(id).data_mut()[j] = base;
        // central differences on a deep composite carry ~1e-9 cancellation
        // noise, so exact-zero gradients (key biases) need a wider floor
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
