//! Run configuration shared by the pipeline and the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClfTrainConfig;
use crate::error::{Error, Result};
use crate::generator::{default_latent_dim, GenTrainConfig};
use crate::synthdata::BlobSpec;

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A `<root>/<class>/*` directory, split into train and test.
    Directory { path: PathBuf },
    /// Procedural blobs with separately drawn train and test sets.
    Synthetic {
        spec: BlobSpec,
        train_positive: usize,
        train_negative: usize,
        test_positive: usize,
        test_negative: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Classifier trained on the raw training split.
    Baseline,
    /// Training split balanced by per-class generators first.
    Framework,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSource,
    pub resolution: usize,
    /// Latent width; derived from `resolution` when absent.
    pub latent_dim: Option<usize>,
    pub generator: GenTrainConfig,
    pub classifier: ClfTrainConfig,
    pub target_per_class: usize,
    pub train_fraction: f64,
    /// One full run per seed.
    pub seeds: Vec<u64>,
    /// Name of the class counted as positive in the metrics.
    pub positive_class: Option<String>,
    /// Targets of the generated-sample sweep.
    pub sweep_targets: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Directory {
                path: PathBuf::from("data"),
            },
            resolution: 256,
            latent_dim: None,
            generator: GenTrainConfig::default(),
            classifier: ClfTrainConfig::default(),
            target_per_class: 500,
            train_fraction: 0.7,
            seeds: vec![0],
            positive_class: None,
            sweep_targets: vec![250, 500, 1000, 2000],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// A configuration sized for a desktop CPU: 64 px blobs, 30 positive and
    /// 10 negative training images, 100 + 100 test images, and shortened
    /// schedules with a larger generator learning rate.
    pub fn desk() -> Self {
        Self {
            data: DataSource::Synthetic {
                spec: BlobSpec::default(),
                train_positive: 30,
                train_negative: 10,
                test_positive: 100,
                test_negative: 100,
            },
            resolution: 64,
            latent_dim: None,
            generator: GenTrainConfig {
                learning_rate: 1e-3,
                batch_size: 16,
                dropout_rate: 0.1,
                epochs: 150,
                seed: 0,
            },
            classifier: ClfTrainConfig {
                learning_rate: 1e-4,
                batch_size: 32,
                dropout_rate: 0.5,
                epochs: 20,
                seed: 0,
            },
            target_per_class: 100,
            train_fraction: 0.7,
            seeds: vec![0, 1, 2],
            positive_class: Some("positive".into()),
            sweep_targets: vec![20, 100, 250, 500],
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
            .unwrap_or_else(|| default_latent_dim(self.resolution))
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 4, got {}",
                self.resolution
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.sweep_targets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("sweep_targets must be ascending".into()));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
        }
        self.generator.validate()?;
        self.classifier.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
