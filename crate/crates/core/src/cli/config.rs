//! Run configuration: built-in profiles, TOML files layered over a profile,
//! and dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, Topology};
use crate::model::{ModelConfig, Pipeline, Protocol, ReconTarget};
use crate::pretrain::{AlignTarget, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `path,label,split` CSV; when absent the synthetic corpus is used.
    /// Manifest clouds are resampled to `synthetic.n_points`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl DataConfig {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match &self.manifest {
            Some(path) => load_manifest(path, self.synthetic.n_points, seed),
            None => self.synthetic.generate(seed),
        }
    }
}

/// Which of the decoder and the regressor a pretraining cell uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressConstruct {
    Neither,
    DecoderOnly,
    RegressorOnly,
    Both,
}

impl RegressConstruct {
    pub const ALL: [RegressConstruct; 4] =
        [RegressConstruct::Neither, RegressConstruct::DecoderOnly, RegressConstruct::RegressorOnly, RegressConstruct::Both];

    pub fn name(self) -> &'static str {
        match self {
            RegressConstruct::Neither => "neither",
            RegressConstruct::DecoderOnly => "decoder_only",
            RegressConstruct::RegressorOnly => "regressor_only",
            RegressConstruct::Both => "both",
        }
    }

    /// Applies the variant to a model configuration.
    pub fn apply(self, model: &mut ModelConfig) {
        match self {
            RegressConstruct::Neither => model.pipeline = Pipeline::EncoderOnly,
            RegressConstruct::DecoderOnly => model.pipeline = Pipeline::DecoderOnly,
            RegressConstruct::RegressorOnly => {
                model.pipeline = Pipeline::Regress;
                model.dec_depth = 0;
            }
            RegressConstruct::Both => model.pipeline = Pipeline::Regress,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    RegDepth,
    DecDepth,
    MaskRatio,
    AlignTarget,
    RegressConstruct,
    Topology,
}

impl Axis {
    pub const ALL: [Axis; 6] =
        [Axis::RegDepth, Axis::DecDepth, Axis::MaskRatio, Axis::AlignTarget, Axis::RegressConstruct, Axis::Topology];

    pub fn name(self) -> &'static str {
        match self {
            Axis::RegDepth => "reg_depth",
            Axis::DecDepth => "dec_depth",
            Axis::MaskRatio => "mask_ratio",
            Axis::AlignTarget => "align_target",
            Axis::RegressConstruct => "regress_construct",
            Axis::Topology => "topology",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Self::ALL.into_iter().find(|a| a.name() == s.replace('-', "_"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub reg_depth: Vec<usize>,
    pub dec_depth: Vec<usize>,
    pub mask_ratio: Vec<f64>,
    pub align_target: Vec<AlignTarget>,
    pub regress_construct: Vec<RegressConstruct>,
    pub topology: Vec<Topology>,
    pub protocols: Vec<Protocol>,
    /// Fine-tune topology for every axis except `topology`; the ablation
    /// tables fine-tune the encoder only.
    pub base_topology: Topology,
    /// Grid cells run concurrently.
    pub parallelism: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let t = AlignTarget::DEFAULT_TEMPERATURE;
        Self {
            reg_depth: vec![2, 4, 8, 12],
            dec_depth: vec![0, 1, 2, 4],
            mask_ratio: vec![0.2, 0.4, 0.6, 0.8],
            align_target: vec![
                AlignTarget::NtXent { temperature: t },
                AlignTarget::InfoNce { temperature: t },
                AlignTarget::Mse,
                AlignTarget::Cosine,
            ],
            regress_construct: RegressConstruct::ALL.to_vec(),
            topology: Topology::ALL.to_vec(),
            protocols: Protocol::ALL.to_vec(),
            base_topology: Topology::A,
            parallelism: 1,
        }
    }
}

impl AblateConfig {
    pub fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::RegDepth => self.reg_depth.len(),
            Axis::DecDepth => self.dec_depth.len(),
            Axis::MaskRatio => self.mask_ratio.len(),
            Axis::AlignTarget => self.align_target.len(),
            Axis::RegressConstruct => self.regress_construct.len(),
            Axis::Topology => self.topology.len(),
        }
    }

    pub fn validate(&self, axes: &[Axis]) -> Result<()> {
        if axes.is_empty() {
            return Err(Error::config("ablate.axes", "name at least one axis"));
        }
        for &a in axes {
            if self.axis_len(a) == 0 {
                return Err(Error::config(format!("ablate.{}", a.name()), "axis has no values"));
            }
            if axes.iter().filter(|&&b| b == a).count() > 1 {
                return Err(Error::config("ablate.axes", format!("axis `{}` given twice", a.name())));
            }
        }
        if self.protocols.is_empty() {
            return Err(Error::config("ablate.protocols", "need at least one protocol"));
        }
        if self.parallelism == 0 {
            return Err(Error::config("ablate.parallelism", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything needed to re-launch a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Small enough for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::desk(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            data: DataConfig { manifest: None, synthetic: SyntheticSpec::default() },
            ablate: AblateConfig::default(),
        }
    }

    /// Full-size model and schedule: 300 epochs at batch 128, 1024 points.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::paper();
        c.pretrain.epochs = 300;
        c.pretrain.batch_size = 128;
        c.pretrain.checkpoint_every = 50;
        c.finetune.epochs = 300;
        c.finetune.batch_size = 32;
        c.finetune.warmup_epochs = 10;
        c.data.synthetic.n_points = 1024;
        c
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    /// A profile name, or a TOML file layered over the profile named by its
    /// optional top-level `profile` key (default `desk`).
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(c) = Self::profile(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), line: 0, message };
        let mut overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let base_name = match overlay.remove("profile") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::config("profile", format!("expected a profile name, found {other}"))),
        };
        let base = Self::profile(&base_name).ok_or_else(|| Error::config("profile", format!("unknown profile `{base_name}`")))?;
        let mut merged = base.to_table()?;
        merge(&mut merged, overlay);
        let mut cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(origin.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::contract(format!("config serialization: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::contract(format!("config serialization: {e}")))
    }

    /// Applies `section.key=value` overrides; values parse as TOML and fall
    /// back to bare strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut table = self.to_table()?;
        for set in sets {
            let (key, raw) = set.split_once('=').ok_or_else(|| Error::config(set.as_str(), "expected key=value"))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            let mut cursor = &mut table;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                if i + 1 == parts.len() {
                    cursor.insert(part.to_string(), value.clone());
                } else {
                    cursor = cursor
                        .entry(part.to_string())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                        .as_table_mut()
                        .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
                }
            }
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config("--set", e.to_string()))
    }

    /// Checks every section before any data or weights are touched.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.data.synthetic.validate()?;
        if self.model.recon_target == ReconTarget::ExternalFeatures {
            return Err(Error::config(
                "model.recon_target",
                "external feature targets are only available through the library API",
            ));
        }
        let n = self.data.synthetic.n_points;
        if n < self.model.patch_count || n < self.model.neighbors {
            return Err(Error::config(
                "data.synthetic.n_points",
                format!("{n} points cannot supply {} patches of {}", self.model.patch_count, self.model.neighbors),
            ));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            // tagged enums switch variant wholesale
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
