use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::density::{DrflConfig, GtDensitySpec, QuerySeedConfig};
use crate::io::read_json;
use crate::model::{Family, ModelConfig};
use crate::scenes::SceneGenConfig;
use crate::{Error, Result};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "D3R_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Cosine decay floor reached at the last step.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, lr_min: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Drives parameter initialisation and batch order.
    pub seed: u64,
    pub channels: usize,
    pub family: Family,
    pub n_groups: usize,
    pub n_scales: usize,
    pub drfl: DrflConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub scenes: SceneGenConfig,
    pub density: GtDensitySpec,
    pub query: QuerySeedConfig,
    /// Dataset written by `gen-data`; generated in memory when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 64,
            family: Family::Gabor,
            n_groups: 4,
            n_scales: 2,
            drfl: DrflConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            batch_size: 8,
            n_train: 2000,
            n_val: 200,
            scenes: SceneGenConfig::default(),
            density: GtDensitySpec::default(),
            query: QuerySeedConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Small configuration used by the gradient checks and quick runs.
    pub fn small() -> Self {
        Self { channels: 8, ..Default::default() }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { channels: self.channels, family: self.family, n_groups: self.n_groups, n_scales: self.n_scales }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::arg("config", d));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_train == 0 && self.epochs > 0 {
            return bad("training needs n_train ≥ 1".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr_min >= 0.0 && self.optimizer.lr_min <= self.optimizer.lr) {
            return bad(format!("learning rates must satisfy 0 ≤ lr_min ≤ lr, lr > 0 (got {:?})", self.optimizer));
        }
        self.drfl.validate()?;
        self.query.validate()?;
        self.scenes.validate()?;
        crate::model::check_image_size(self.scenes.height, self.scenes.width)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the [`OUT_DIR_ENV`] override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
    }

    /// SHA-256 of the configuration with the output location blanked, so the
    /// same experiment hashes identically wherever it writes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&c).expect("config serializes"));
        crate::scenes::hex(&h.finalize())
    }
}
