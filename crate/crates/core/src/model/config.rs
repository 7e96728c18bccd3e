use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;

/// Where regressor blocks after the first take keys and values from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Block `i > 1` attends to the output of block `i − 1`.
    #[default]
    PreviousLayer,
    /// Every block attends to the encoded visible tokens.
    VisibleAlways,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Local patch coordinates, scored with l2 Chamfer.
    #[default]
    Coordinates,
    /// Precomputed per-patch feature vectors, scored with cosine distance.
    ExternalFeatures,
}

/// Pretraining dataflow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Encoder → mask regressor → decoder over predicted tokens.
    #[default]
    Regress,
    /// No regressor: the decoder sees encoded visible tokens plus mask
    /// queries (Point-MAE style).
    DecoderOnly,
    /// Neither regressor nor decoder: the encoder sees all tokens with masked
    /// ones replaced by the mask query (BERT style).
    EncoderOnly,
}

/// `floor(ratio · s)`, tolerant of products that land a few ulps below an
/// integer (`0.29 · 100`).
pub fn masked_count(s: usize, ratio: f64) -> usize {
    (ratio * s as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub reg_depth: usize,
    pub dec_depth: usize,
    pub patch_count: usize,
    pub neighbors: usize,
    pub mask_ratio: f64,
    #[serde(default)]
    pub kv_mode: KvMode,
    #[serde(default)]
    pub recon_target: ReconTarget,
    /// Width of external reconstruction targets.
    #[serde(default)]
    pub feature_dim: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub pipeline: Pipeline,
    /// Hidden width of the 3-layer classification heads.
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale shrink of the full configuration.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            enc_depth: 3,
            reg_depth: 2,
            dec_depth: 1,
            patch_count: 16,
            neighbors: 16,
            mask_ratio: 0.8,
            kv_mode: KvMode::PreviousLayer,
            recon_target: ReconTarget::Coordinates,
            feature_dim: 0,
            precision: Precision::F64,
            pipeline: Pipeline::Regress,
            head_hidden: 128,
        }
    }

    /// Full-size configuration: 384 wide, 6 heads, 12/4/2 blocks, 64 patches
    /// of 32 points.
    pub fn paper() -> Self {
        Self {
            dim: 384,
            heads: 6,
            enc_depth: 12,
            reg_depth: 4,
            dec_depth: 2,
            patch_count: 64,
            neighbors: 32,
            head_hidden: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::config("model.dim", "must be a positive even number"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config("model.heads", format!("must divide dim {}", self.dim)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("model.mask_ratio", "must lie in (0, 1)"));
        }
        if self.patch_count < 2 {
            return Err(Error::config("model.patch_count", "need at least 2 patches"));
        }
        let masked = self.masked_count();
        if masked == 0 || masked >= self.patch_count {
            return Err(Error::config(
                "model.mask_ratio",
                format!("floor({} * {}) = {} leaves no visible or no masked patch", self.mask_ratio, self.patch_count, masked),
            ));
        }
        if self.neighbors == 0 {
            return Err(Error::config("model.neighbors", "must be at least 1"));
        }
        if self.recon_target == ReconTarget::ExternalFeatures && self.feature_dim == 0 {
            return Err(Error::config("model.feature_dim", "required for external_features target"));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("model.head_hidden", "must be positive"));
        }
        Ok(())
    }

    /// Number of masked patches, `floor(mask_ratio · S)`.
    pub fn masked_count(&self) -> usize {
        masked_count(self.patch_count, self.mask_ratio)
    }

    /// Output width of the reconstruction head.
    pub fn recon_width(&self) -> usize {
        match self.recon_target {
            ReconTarget::Coordinates => self.neighbors * 3,
            ReconTarget::ExternalFeatures => self.feature_dim,
        }
    }
}
