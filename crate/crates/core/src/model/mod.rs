//! The backbone: patch embedding, positional embedding, self-attention
//! encoder, cross-attention mask regressor with a shared mask query,
//! lightweight decoder, reconstruction head and pooled classification heads.

pub mod checkpoint;
mod config;
mod head;
mod layers;
mod params;

pub use config::{masked_count, KvMode, ModelConfig, Pipeline, ReconTarget};
pub use head::{BnStats, ClassifierHead, HeadMode, HeadSpec, Protocol, BN_MOMENTUM, DROPOUT};
pub use layers::{Attention, CrossBlock, LayerNorm, Linear, Mlp, PatchEmbed, PosEmbed, SelfBlock};
pub use params::{gaussian, xavier, BindMode, Binder, ParamEntry, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{PatchSet, Point};
use crate::numerics::{NumericsError, ParamId, Tape, Tensor, Var};

/// Standard deviation of the mask query initialization.
pub const MASK_QUERY_STD: f64 = 0.02;

/// Pipeline stage a [`TokenSet`] belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Embedded,
    EncodedVisible,
    TeacherMasked,
    PredictedMasked,
    DecodedMasked,
}

/// Token matrix on a tape together with the 3D centers it is anchored at.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    /// `[rows, 3]` constant.
    pub positions: Var,
    pub role: Role,
}

impl TokenSet {
    pub fn new(tape: &Tape, tokens: Var, positions: Var, role: Role) -> Result<Self> {
        let (t, p) = (tape.value(tokens), tape.value(positions));
        if t.shape().len() != 2 || p.shape() != [t.rows(), 3] {
            return Err(Error::contract(format!(
                "token set: {:?} tokens with {:?} positions",
                t.shape(),
                p.shape()
            )));
        }
        Ok(Self { tokens, positions, role })
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.value(self.tokens).rows()
    }

    fn expect(&self, role: Role, stage: &str) -> Result<()> {
        if self.role != role {
            return Err(Error::contract(format!("{stage} expects {:?} tokens, got {:?}", role, self.role)));
        }
        Ok(())
    }
}

/// Parameter ids of every backbone component.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: PatchEmbed,
    pub pos: PosEmbed,
    pub encoder: Vec<SelfBlock>,
    pub mask_query: ParamId,
    pub regressor: Vec<CrossBlock>,
    pub decoder: Vec<SelfBlock>,
    pub recon: Linear,
    /// Parameters `0..encoding_path_len` are the embed + pos + encoder path
    /// mirrored by the teacher.
    pub encoding_path_len: usize,
    /// Parameters `0..backbone_len` exclude any classification head.
    pub backbone_len: usize,
}

/// Student parameters, the EMA teacher of the encoding path, and an optional
/// classification head.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub teacher: ParamStore,
    pub layout: Layout,
    pub head: Option<ClassifierHead>,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.dim, config.heads);
        let embed = PatchEmbed::new(&mut store, &mut rng, d);
        let pos = PosEmbed::new(&mut store, &mut rng, d);
        let encoder = (0..config.enc_depth).map(|i| SelfBlock::new(&mut store, &mut rng, &format!("encoder.{i}"), d, h)).collect();
        let encoding_path_len = store.len();
        let mask_query = store.add("mask_query", gaussian(&mut rng, &[1, d], MASK_QUERY_STD), false);
        let regressor = (0..config.reg_depth).map(|i| CrossBlock::new(&mut store, &mut rng, &format!("regressor.{i}"), d, h)).collect();
        let decoder = (0..config.dec_depth).map(|i| SelfBlock::new(&mut store, &mut rng, &format!("decoder.{i}"), d, h)).collect();
        let recon = Linear::new(&mut store, &mut rng, "recon", d, config.recon_width());
        let backbone_len = store.len();
        let teacher = store.prefix(encoding_path_len);
        let layout = Layout { embed, pos, encoder, mask_query, regressor, decoder, recon, encoding_path_len, backbone_len };
        Ok(Self { config, params: store, teacher, layout, head: None })
    }

    /// Replaces any classification head with a freshly initialized one.
    pub fn attach_head(&mut self, spec: HeadSpec, seed: u64) {
        self.params.truncate(self.layout.backbone_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Some(ClassifierHead::new(&mut self.params, &mut rng, spec));
    }

    /// Checksum of backbone parameters (everything except the head).
    pub fn backbone_checksum(&self) -> String {
        self.params.checksum_range(0..self.layout.backbone_len)
    }

    pub fn teacher_checksum(&self) -> String {
        self.teacher.checksum()
    }

    /// `teacher ← m·teacher + (1 − m)·student` over the encoding path.
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::contract(format!("ema momentum {} outside [0, 1]", momentum)));
        }
        for id in self.teacher.ids() {
            let student = self.params.get(id);
            let teacher = self.teacher.get_mut(id);
            if momentum == 0.0 {
                teacher.data_mut().copy_from_slice(student.data());
                continue;
            }
            for (t, s) in teacher.data_mut().iter_mut().zip(student.data()) {
                *t = momentum * *t + (1.0 - momentum) * s;
            }
        }
        Ok(())
    }

    /// Teacher and student encoding paths have identical names and shapes.
    pub fn teacher_congruent(&self) -> bool {
        self.teacher.len() == self.layout.encoding_path_len
            && self.teacher.entries().iter().zip(self.params.entries()).all(|(t, s)| t.name == s.name && t.value.shape() == s.value.shape())
    }
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::new(vec![points.len(), 3], points.iter().flatten().copied().collect()).expect("n×3")
}

/// One forward pass of the backbone stages on a tape.
pub struct Forward<'a, 's> {
    pub tape: &'a mut Tape,
    pub params: Binder<'s>,
    pub layout: &'a Layout,
    pub config: &'a ModelConfig,
}

impl<'a, 's> Forward<'a, 's> {
    pub fn new(tape: &'a mut Tape, params: Binder<'s>, layout: &'a Layout, config: &'a ModelConfig) -> Self {
        Self { tape, params, layout, config }
    }

    /// Student forward with trainable parameters.
    pub fn student(tape: &'a mut Tape, state: &'s ModelState) -> Forward<'a, 's>
    where
        's: 'a,
    {
        Self::new(tape, Binder::new(&state.params, BindMode::Trainable), &state.layout, &state.config)
    }

    /// Teacher forward: constant parameters from the EMA copy.
    pub fn teacher(tape: &'a mut Tape, state: &'s ModelState) -> Forward<'a, 's>
    where
        's: 'a,
    {
        Self::new(tape, Binder::new(&state.teacher, BindMode::Constant), &state.layout, &state.config)
    }

    pub fn positions(&mut self, points: &[Point]) -> Result<Var> {
        Ok(self.tape.constant(points_tensor(points))?)
    }

    /// One `d`-vector per patch, anchored at the patch centers.
    pub fn embed_patches(&mut self, patches: &PatchSet) -> Result<TokenSet> {
        let local = Tensor::new(vec![patches.patches.len(), 3], patches.patches_flat())?;
        let local = self.tape.constant(local)?;
        let tokens = self.layout.embed.forward(self.tape, &mut self.params, local, patches.k)?;
        let positions = self.positions(&patches.centers)?;
        TokenSet::new(self.tape, tokens, positions, Role::Embedded)
    }

    pub fn pos_embed(&mut self, positions: Var) -> Result<Var, NumericsError> {
        self.layout.pos.forward(self.tape, &mut self.params, positions)
    }

    /// Rows of a token set (tokens and positions together).
    pub fn select(&mut self, set: &TokenSet, rows: &[usize]) -> Result<TokenSet> {
        let tokens = self.tape.gather_rows(set.tokens, rows)?;
        let positions = self.tape.gather_rows(set.positions, rows)?;
        TokenSet::new(self.tape, tokens, positions, set.role)
    }

    fn run_self_blocks(&mut self, blocks: &[SelfBlock], mut x: Var) -> Result<Var, NumericsError> {
        for b in blocks {
            x = b.forward(self.tape, &mut self.params, x)?;
        }
        Ok(x)
    }

    /// Positions added, then the self-attention encoder stack.
    pub fn encode(&mut self, visible: &TokenSet) -> Result<TokenSet> {
        visible.expect(Role::Embedded, "encode")?;
        let pos = self.pos_embed(visible.positions)?;
        let x = self.tape.add(visible.tokens, pos)?;
        let blocks = &self.layout.encoder;
        let x = self.run_self_blocks(blocks, x)?;
        TokenSet::new(self.tape, x, visible.positions, Role::EncodedVisible)
    }

    /// Shared mask query broadcast to one row per position, plus the
    /// positional embedding.
    pub fn mask_queries(&mut self, positions: Var) -> Result<Var> {
        let rows = self.tape.value(positions).rows();
        let query = self.params.get(self.tape, self.layout.mask_query)?;
        let q = self.tape.gather_rows(query, &vec![0; rows])?;
        let pos = self.pos_embed(positions)?;
        Ok(self.tape.add(q, pos)?)
    }

    /// Cross-attention regressor predicting tokens at `positions` from the
    /// encoded visible tokens.
    pub fn regress(&mut self, encoded: &TokenSet, positions: Var) -> Result<TokenSet> {
        encoded.expect(Role::EncodedVisible, "regress")?;
        if self.tape.value(positions).rows() == 0 {
            return Err(Error::contract("regress needs at least one masked position"));
        }
        let mut q = self.mask_queries(positions)?;
        let mut context = encoded.tokens;
        for block in &self.layout.regressor {
            q = block.forward(self.tape, &mut self.params, q, context)?;
            if self.config.kv_mode == KvMode::PreviousLayer {
                context = q;
            }
        }
        TokenSet::new(self.tape, q, positions, Role::PredictedMasked)
    }

    /// Self-attention decoder over predicted tokens only.
    pub fn decode(&mut self, predicted: &TokenSet) -> Result<TokenSet> {
        predicted.expect(Role::PredictedMasked, "decode")?;
        if self.layout.decoder.is_empty() {
            return TokenSet::new(self.tape, predicted.tokens, predicted.positions, Role::DecodedMasked);
        }
        let pos = self.pos_embed(predicted.positions)?;
        let x = self.tape.add(predicted.tokens, pos)?;
        let blocks = &self.layout.decoder;
        let x = self.run_self_blocks(blocks, x)?;
        TokenSet::new(self.tape, x, predicted.positions, Role::DecodedMasked)
    }

    /// Decoder over `[encoded visible; mask queries]` (no regressor); returns
    /// the decoded masked rows.
    pub fn decode_with_mask_tokens(&mut self, encoded: &TokenSet, masked_positions: Var) -> Result<TokenSet> {
        encoded.expect(Role::EncodedVisible, "decode_with_mask_tokens")?;
        let n_vis = encoded.len(self.tape);
        let queries = self.mask_queries(masked_positions)?;
        let vis_pos = self.pos_embed(encoded.positions)?;
        let vis = self.tape.add(encoded.tokens, vis_pos)?;
        let x = self.tape.concat_rows(&[vis, queries])?;
        let blocks = &self.layout.decoder;
        let x = self.run_self_blocks(blocks, x)?;
        let n_mask = self.tape.value(masked_positions).rows();
        let rows: Vec<usize> = (n_vis..n_vis + n_mask).collect();
        let x = self.tape.gather_rows(x, &rows)?;
        TokenSet::new(self.tape, x, masked_positions, Role::DecodedMasked)
    }

    /// Encoder over all tokens with masked rows replaced by the mask query;
    /// returns the masked rows.
    pub fn encode_with_mask_tokens(&mut self, embedded: &TokenSet, masked: &[usize]) -> Result<TokenSet> {
        embedded.expect(Role::Embedded, "encode_with_mask_tokens")?;
        let s = embedded.len(self.tape);
        let query = self.params.get(self.tape, self.layout.mask_query)?;
        let stacked = self.tape.concat_rows(&[embedded.tokens, query])?;
        let rows: Vec<usize> = (0..s).map(|i| if masked.contains(&i) { s } else { i }).collect();
        let mixed = self.tape.gather_rows(stacked, &rows)?;
        let input = TokenSet::new(self.tape, mixed, embedded.positions, Role::Embedded)?;
        let encoded = self.encode(&input)?;
        let tokens = self.tape.gather_rows(encoded.tokens, masked)?;
        let positions = self.tape.gather_rows(embedded.positions, masked)?;
        TokenSet::new(self.tape, tokens, positions, Role::DecodedMasked)
    }

    /// Linear prediction head: `[rows, k·3]` coordinates or
    /// `[rows, feature_dim]` features.
    pub fn reconstruct_head(&mut self, decoded: &TokenSet) -> Result<Var> {
        decoded.expect(Role::DecodedMasked, "reconstruct_head")?;
        Ok(self.layout.recon.forward(self.tape, &mut self.params, decoded.tokens)?)
    }
}

/// `concat(max over rows, mean over rows)` → `[1, 2d]`.
pub fn pool_concat(tape: &mut Tape, tokens: Var) -> Result<Var, NumericsError> {
    let n = tape.value(tokens).rows();
    if n == 0 {
        return Err(NumericsError::Contract("pool_concat needs at least one token".into()));
    }
    let max = tape.segment_max(tokens, n)?;
    let mean = tape.segment_mean(tokens, n)?;
    tape.concat_cols(&[max, mean])
}

#[cfg(test)]
mod tests;
