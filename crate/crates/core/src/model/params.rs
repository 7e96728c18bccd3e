//! Named parameter storage and per-tape binding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::numerics::{NumericsError, ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (matrices yes; biases, norms, queries no).
    pub decay: bool,
}

/// Ordered collection of learnable tensors addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }

    /// Copy of the first `len` entries.
    pub fn prefix(&self, len: usize) -> ParamStore {
        ParamStore { entries: self.entries[..len].to_vec() }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the bit patterns of all values in
    /// `range`.
    pub fn checksum_range(&self, range: std::ops::Range<usize>) -> String {
        let mut h = Sha256::new();
        for e in &self.entries[range] {
            h.update(e.name.as_bytes());
            for &s in e.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn checksum(&self) -> String {
        self.checksum_range(0..self.entries.len())
    }
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// How a [`Binder`] exposes stored parameters on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Differentiable parameter leaves.
    Trainable,
    /// Constant leaves: no gradient ever reaches the store.
    Constant,
}

/// Lazily binds parameters of one store onto one tape, each at most once.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    frozen: Vec<bool>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, mode: BindMode) -> Self {
        let frozen = vec![mode == BindMode::Constant; store.len()];
        Self { store, vars: vec![None; store.len()], frozen }
    }

    /// Treats the first `len` parameters as constants, the rest per `mode`.
    pub fn freeze_prefix(mut self, len: usize) -> Self {
        for f in self.frozen.iter_mut().take(len) {
            *f = true;
        }
        self
    }

    /// Moves the bindings out, leaving this binder empty.
    pub fn take(&mut self) -> Binder<'s> {
        Binder { store: self.store, vars: std::mem::take(&mut self.vars), frozen: std::mem::take(&mut self.frozen) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Result<Var, NumericsError> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let value = self.store.get(id);
        let v = if self.frozen[id.0] { tape.constant(value.clone())? } else { tape.param(id, value)? };
        self.vars[id.0] = Some(v);
        Ok(v)
    }
}
