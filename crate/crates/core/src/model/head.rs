//! Classification heads for the three transfer protocols.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Binder, ParamStore};
use crate::numerics::{NumericsError, ParamId, Tape, Tensor, Var, LN_EPS};

pub const DROPOUT: f64 = 0.5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    /// 3-layer MLP head, every parameter trained.
    Full,
    /// Single linear layer on a frozen backbone.
    Linear,
    /// 3-layer MLP on a frozen backbone.
    Mlp3,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Full, Protocol::Linear, Protocol::Mlp3];

    pub fn freezes_backbone(self) -> bool {
        !matches!(self, Protocol::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Full => "FULL",
            Protocol::Linear => "LINEAR",
            Protocol::Mlp3 => "MLP3",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "FULL" => Some(Protocol::Full),
            "LINEAR" => Some(Protocol::Linear),
            "MLP3" => Some(Protocol::Mlp3),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub protocol: Protocol,
    pub in_dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
enum Layers {
    Linear(Linear),
    Mlp { fc1: Linear, bn1: BatchNorm, fc2: Linear, bn2: BatchNorm, fc3: Linear },
}

pub enum HeadMode<'a> {
    /// Batch statistics and dropout drawn from `rng`.
    Train(&'a mut ChaCha8Rng),
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub spec: HeadSpec,
    layers: Layers,
    /// Running batch-norm statistics, one entry per normalization layer.
    pub running: Vec<BnStats>,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: HeadSpec) -> Self {
        let bn = |store: &mut ParamStore, name: &str, dim: usize| BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        };
        let h = spec.hidden;
        let (layers, running) = match spec.protocol {
            Protocol::Linear => (Layers::Linear(Linear::new(store, rng, "head.fc", spec.in_dim, spec.n_classes)), vec![]),
            Protocol::Full | Protocol::Mlp3 => {
                let fc1 = Linear::new(store, rng, "head.fc1", spec.in_dim, h);
                let bn1 = bn(store, "head.bn1", h);
                let fc2 = Linear::new(store, rng, "head.fc2", h, h);
                let bn2 = bn(store, "head.bn2", h);
                let fc3 = Linear::new(store, rng, "head.fc3", h, spec.n_classes);
                let stats = || BnStats { mean: vec![0.0; h], var: vec![1.0; h] };
                (Layers::Mlp { fc1, bn1, fc2, bn2, fc3 }, vec![stats(), stats()])
            }
        };
        Self { spec, layers, running }
    }

    /// Logits `[batch, n_classes]` for features `[batch, in_dim]`, plus the
    /// batch statistics observed in training mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        feats: Var,
        mut mode: HeadMode,
    ) -> Result<(Var, Vec<BnStats>), NumericsError> {
        if tape.value(feats).cols() != self.spec.in_dim {
            return Err(NumericsError::Shape {
                op: "head_forward",
                detail: format!("feature width {} but head expects {}", tape.value(feats).cols(), self.spec.in_dim),
            });
        }
        match &self.layers {
            Layers::Linear(fc) => Ok((fc.forward(tape, p, feats)?, vec![])),
            Layers::Mlp { fc1, bn1, fc2, bn2, fc3 } => {
                let mut observed = Vec::new();
                let mut x = feats;
                for (i, (fc, bn)) in [(fc1, bn1), (fc2, bn2)].into_iter().enumerate() {
                    x = fc.forward(tape, p, x)?;
                    let gamma = p.get(tape, bn.gamma)?;
                    let beta = p.get(tape, bn.beta)?;
                    x = match &mut mode {
                        HeadMode::Train(_) => {
                            let (y, mean, var) = tape.batch_norm(x, gamma, beta, LN_EPS)?;
                            observed.push(BnStats { mean, var });
                            y
                        }
                        HeadMode::Eval => {
                            let stats = &self.running[i];
                            let shift = Tensor::new(vec![stats.mean.len()], stats.mean.iter().map(|m| -m).collect())?;
                            let inv = Tensor::new(
                                vec![stats.var.len()],
                                stats.var.iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect(),
                            )?;
                            let shift = tape.constant(shift)?;
                            let inv = tape.constant(inv)?;
                            let y = tape.add_row(x, shift)?;
                            let y = tape.mul_row(y, inv)?;
                            let y = tape.mul_row(y, gamma)?;
                            tape.add_row(y, beta)?
                        }
                    };
                    x = tape.relu(x)?;
                    if let HeadMode::Train(rng) = &mut mode {
                        let shape = tape.shape(x).to_vec();
                        let n: usize = shape.iter().product();
                        let keep = 1.0 - DROPOUT;
                        let mask = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                        let mask = tape.constant(Tensor::new(shape, mask)?)?;
                        x = tape.mul(x, mask)?;
                    }
                }
                Ok((fc3.forward(tape, p, x)?, observed))
            }
        }
    }

    /// Exponential update of the running statistics.
    pub fn update_running(&mut self, observed: &[BnStats]) {
        for (run, obs) in self.running.iter_mut().zip(observed) {
            for (r, o) in run.mean.iter_mut().zip(&obs.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
            for (r, o) in run.var.iter_mut().zip(&obs.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        }
    }
}
