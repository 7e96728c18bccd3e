//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic `PRAECKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header describing every tensor,
//! then the tensors' values as little-endian `f64` in header order. Values are
//! stored bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HeadSpec, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, Tensor};
use crate::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8; 8] = b"PRAECKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Training position and the state needed to resume the random streams.
/// Every random draw is derived from `(seed, step, stream)`, so the seed and
/// counters are the full RNG state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Option<AdamW>,
    pub progress: Progress,
    /// Serialized run configuration that produced the checkpoint.
    pub run_config: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Student,
    Teacher,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    head: Option<HeadSpec>,
    optimizer: Option<AdamWConfig>,
    optimizer_step: u64,
    progress: Progress,
    run_config: Option<String>,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(model: ModelState) -> Self {
        Self { model, optimizer: None, progress: Progress::default(), run_config: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut payload: Vec<Tensor> = Vec::new();
        let mut push = |name: String, group: Group, t: Tensor| {
            records.push(TensorRecord { name, group, shape: t.shape().to_vec() });
            payload.push(t);
        };
        for e in self.model.params.entries() {
            push(e.name.clone(), Group::Student, e.value.clone());
        }
        for e in self.model.teacher.entries() {
            push(e.name.clone(), Group::Teacher, e.value.clone());
        }
        if let Some(head) = &self.model.head {
            for (i, s) in head.running.iter().enumerate() {
                push(format!("head.bn{}.running_mean", i + 1), Group::Buffer, Tensor::new(vec![s.mean.len()], s.mean.clone())?);
                push(format!("head.bn{}.running_var", i + 1), Group::Buffer, Tensor::new(vec![s.var.len()], s.var.clone())?);
            }
        }
        if let Some(opt) = &self.optimizer {
            for (e, m) in self.model.params.entries().iter().zip(&opt.m) {
                push(e.name.clone(), Group::AdamM, m.clone());
            }
            for (e, v) in self.model.params.entries().iter().zip(&opt.v) {
                push(e.name.clone(), Group::AdamV, v.clone());
            }
        }
        let header = Header {
            model_config: self.model.config.clone(),
            head: self.model.head.as_ref().map(|h| h.spec.clone()),
            optimizer: self.optimizer.as_ref().map(|o| o.config.clone()),
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
            progress: self.progress.clone(),
            run_config: self.run_config.clone(),
            tensors: records,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.iter().map(|t| t.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", version)));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let mut model = ModelState::new(header.model_config.clone(), 0)?;
        if let Some(spec) = header.head.clone() {
            model.attach_head(spec, 0);
        }
        let mut optimizer = header.optimizer.clone().map(|c| {
            let mut o = AdamW::new(c, &model.params);
            o.step = header.optimizer_step;
            o
        });

        let mut cursor = 20 + hlen;
        let mut seen_student = vec![false; model.params.len()];
        for rec in &header.tensors {
            let n: usize = rec.shape.iter().product();
            let raw = bytes.get(cursor..cursor + n * 8).ok_or_else(|| bad("truncated payload"))?;
            cursor += n * 8;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(rec.shape.clone(), data)?;
            let lookup = |store: &super::ParamStore| -> Result<ParamId> {
                let id = store.find(&rec.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", rec.name)))?;
                if store.get(id).shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        rec.name,
                        t.shape(),
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            };
            match rec.group {
                Group::Student => {
                    let id = lookup(&model.params)?;
                    seen_student[id.0] = true;
                    *model.params.get_mut(id) = t;
                }
                Group::Teacher => {
                    let id = lookup(&model.teacher)?;
                    *model.teacher.get_mut(id) = t;
                }
                Group::AdamM | Group::AdamV => {
                    let id = lookup(&model.params)?;
                    let opt = optimizer.as_mut().ok_or_else(|| bad("optimizer tensors without optimizer config"))?;
                    let slot = if rec.group == Group::AdamM { &mut opt.m } else { &mut opt.v };
                    slot[id.0] = t;
                }
                Group::Buffer => {
                    let head = model.head.as_mut().ok_or_else(|| bad("buffer without head"))?;
                    let (layer, field) = parse_buffer_name(&rec.name).ok_or_else(|| Error::Checkpoint(format!("unknown buffer {}", rec.name)))?;
                    let stats = head.running.get_mut(layer).ok_or_else(|| Error::Checkpoint(format!("unknown buffer {}", rec.name)))?;
                    let target = if field == "running_mean" { &mut stats.mean } else { &mut stats.var };
                    if target.len() != t.len() {
                        return Err(Error::Checkpoint(format!("buffer {} has wrong length", rec.name)));
                    }
                    *target = t.into_data();
                }
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        if let Some(i) = seen_student.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing tensor {}", model.params.entry(ParamId(i)).name)));
        }
        Ok(Self { model, optimizer, progress: header.progress, run_config: header.run_config })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_buffer_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("head.bn")?;
    let (idx, field) = rest.split_once('.')?;
    let layer = idx.parse::<usize>().ok()?.checked_sub(1)?;
    matches!(field, "running_mean" | "running_var").then_some((layer, field))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Protocol;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = ModelState::new(ModelConfig { enc_depth: 1, reg_depth: 1, dec_depth: 1, ..ModelConfig::desk() }, 3).unwrap();
        model.attach_head(HeadSpec { protocol: Protocol::Full, in_dim: 128, n_classes: 4, hidden: 16 }, 4);
        model.head.as_mut().unwrap().running[0].mean[3] = 0.1 + 0.2;
        model.ema_update(0.5).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
        opt.step = 17;
        opt.m[2].data_mut()[0] = std::f64::consts::PI;
        let ckpt = Checkpoint {
            model,
            optimizer: Some(opt),
            progress: Progress { seed: 9, step: 17, epoch: 2 },
            run_config: Some("[run]\nseed = 9\n".into()),
        };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.model.params, ckpt.model.params);
        assert_eq!(back.model.teacher, ckpt.model.teacher);
        assert_eq!(back.model.head.unwrap().running, ckpt.model.head.unwrap().running);
        assert_eq!(back.optimizer, ckpt.optimizer);
        assert_eq!(back.progress, ckpt.progress);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = ModelState::new(ModelConfig { enc_depth: 1, reg_depth: 1, dec_depth: 0, ..ModelConfig::desk() }, 1).unwrap();
        let bytes = Checkpoint::new(model).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes.clone();
        version[8] = 99;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
