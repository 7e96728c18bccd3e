//! Building blocks. Each layer holds the [`ParamId`]s of its tensors and is
//! evaluated against a [`Binder`].

use rand_chacha::ChaCha8Rng;

use super::params::{xavier, Binder, ParamStore};
use crate::numerics::{NumericsError, ParamId, Tape, Tensor, Var, LN_EPS};

type R<T> = Result<T, NumericsError>;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> R<Var> {
        let w = p.get(tape, self.w)?;
        let b = p.get(tape, self.b)?;
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> R<Var> {
        let g = p.get(tape, self.gamma)?;
        let b = p.get(tape, self.beta)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two linear maps with GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dims[0], dims[1]),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dims[1], dims[2]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> R<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product attention from a query stream to a
/// key/value stream.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, queries: Var, context: Var) -> R<Var> {
        let q = self.q.forward(tape, p, queries)?;
        let k = self.k.forward(tape, p, context)?;
        let v = self.v.forward(tape, p, context)?;
        let dim = tape.value(q).cols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.out.forward(tape, p, merged)
    }
}

/// Pre-norm self-attention block with a ×4 feed-forward.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), [dim, 4 * dim, dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> R<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let f = self.mlp.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend to a separate context,
/// then a ×4 feed-forward. No self-attention among queries.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), [dim, 4 * dim, dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, queries: Var, context: Var) -> R<Var> {
        let q = self.norm_q.forward(tape, p, queries)?;
        let kv = self.norm_kv.forward(tape, p, context)?;
        let a = self.attn.forward(tape, p, q, kv)?;
        let x = tape.add(queries, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let f = self.mlp.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

/// Mini-PointNet: shared per-point MLP, max-pool, concatenate the pooled
/// feature back onto each point, second shared MLP, max-pool.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub first: Mlp,
    pub second: Mlp,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let half = dim / 2;
        Self {
            first: Mlp::new(store, rng, "embed.first", [3, half, half]),
            second: Mlp::new(store, rng, "embed.second", [dim, dim, dim]),
        }
    }

    /// `points` is `[S·k, 3]` local coordinates, grouped by patch.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, points: Var, k: usize) -> R<Var> {
        let rows = tape.value(points).rows();
        let per_point = self.first.forward(tape, p, points)?;
        let pooled = tape.segment_max(per_point, k)?;
        let spread: Vec<usize> = (0..rows).map(|r| r / k).collect();
        let spread = tape.gather_rows(pooled, &spread)?;
        let joined = tape.concat_cols(&[spread, per_point])?;
        let h = self.second.forward(tape, p, joined)?;
        tape.segment_max(h, k)
    }
}

/// Two-layer MLP from 3D centers to token width.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub mlp: Mlp,
}

impl PosEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self { mlp: Mlp::new(store, rng, "pos", [3, dim, dim]) }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, centers: Var) -> R<Var> {
        self.mlp.forward(tape, p, centers)
    }
}
