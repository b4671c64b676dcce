//! Run configuration with TOML persistence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::LossConfig;
use crate::embedding::AdapterScope;
use crate::error::{Error, Result};
use crate::fusion::{Aggregation, CoAttentionConfig, FusionLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub ff_inner: usize,
    pub heads: usize,
    pub d_m: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub batch_size: usize,
    /// Rate for newly initialized modules.
    pub learning_rate: f64,
    /// Rate for the backbone tail and adapter.
    pub backbone_learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub tau: f64,
    pub aggregation: Aggregation,
    pub adapter_scope: AdapterScope,
    /// Also route text streams through a backbone tail with an adapter.
    pub adapter_on_text: bool,
    pub layout: FusionLayout,
    pub use_features: bool,
    pub scale_by_model_dim: bool,
    /// Width of hashed text embeddings for samples without text embeddings.
    pub fallback_text_dim: usize,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 256,
            ff_inner: 512,
            heads: 8,
            d_m: 128,
            dropout: 0.1,
            max_seq_len: 512,
            batch_size: 24,
            learning_rate: 5e-5,
            backbone_learning_rate: 1e-5,
            epochs: 15,
            seed: 42,
            alpha: 1.0,
            tau: 0.3,
            aggregation: Aggregation::Mean,
            adapter_scope: AdapterScope::AdapterOnly,
            adapter_on_text: false,
            layout: FusionLayout::Full,
            use_features: true,
            scale_by_model_dim: false,
            fallback_text_dim: 32,
            train_manifest: None,
            val_manifest: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Small settings for single-core runs on synthetic data.
    pub fn desk() -> Self {
        RunConfig { d: 64, ff_inner: 128, heads: 4, epochs: 10, learning_rate: 3e-3, backbone_learning_rate: 6e-4, ..RunConfig::default() }
    }

    /// Text streams only, one pairing, no explicit features.
    pub fn text_only(mut self) -> Self {
        self.layout = FusionLayout::TextOnly;
        self.use_features = false;
        self
    }

    pub fn co_attention(&self) -> CoAttentionConfig {
        CoAttentionConfig {
            d: self.d,
            heads: self.heads,
            ff_inner: self.ff_inner,
            dropout: self.dropout,
            scale_by_model_dim: self.scale_by_model_dim,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, tau: self.tau }
    }

    pub fn validate(&self) -> Result<()> {
        self.co_attention().validate()?;
        self.loss().validate()?;
        let positive = [
            ("d_m", self.d_m),
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
            ("fallback_text_dim", self.fallback_text_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("backbone_learning_rate", self.backbone_learning_rate)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.alpha < 1.0 && self.batch_size < 2 {
            return Err(Error::Config("the contrastive term needs batch_size >= 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
