use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::data::{io, SyntheticSpec, DEFAULT_HOURS};
use crate::metrics::StdKind;
use crate::mix::MixMode;
use crate::model::ModelConfig;
use crate::train::{OptimizerConfig, OptimizerKind, TrainConfig};

fn default_hours() -> usize {
    DEFAULT_HOURS
}

/// Where the cohort comes from; tagged by `"source"` in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// A directory in the `events.csv` / `labels.csv` / `schema.json` layout.
    Csv {
        dir: PathBuf,
        #[serde(default = "default_hours")]
        hours: usize,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig { k: 10, seed: 0 }
    }
}

/// Everything a run depends on. `seed` drives initialization, shuffling and
/// mixing; fold assignment has its own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub folds: FoldConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_std")]
    pub std: StdKind,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Run folds on a thread pool. Fold results do not depend on it.
    #[serde(default)]
    pub parallel: bool,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_std() -> StdKind {
    StdKind::Population
}

/// The fields that determine learned parameters and scores.
#[derive(Serialize)]
struct Fingerprinted<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: &'a DataSource,
    folds: &'a FoldConfig,
    seed: u64,
}

impl RunConfig {
    /// Hyperparameters of the full-size model; expects a CSV cohort with 812
    /// encoded columns.
    pub fn paper() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            train: TrainConfig::default(),
            data: DataSource::Csv {
                dir: PathBuf::from("data/ich"),
                hours: DEFAULT_HOURS,
            },
            folds: FoldConfig::default(),
            seed: 0,
            threshold: 0.5,
            std: StdKind::Population,
            out_dir: None,
            parallel: false,
        }
    }

    /// Small model on a well separated synthetic cohort of the default size;
    /// a 10-fold run takes about three minutes on one core.
    pub fn desk() -> Self {
        let mut train = TrainConfig {
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            epochs: 4,
            batch_size: 32,
            ..TrainConfig::default()
        };
        train.patchup.mode = MixMode::Soft;
        RunConfig {
            model: ModelConfig::desk(),
            train,
            data: DataSource::Synthetic(SyntheticSpec {
                separation: 3.0,
                ..SyntheticSpec::default()
            }),
            folds: FoldConfig::default(),
            seed: 0,
            threshold: 0.5,
            std: StdKind::Population,
            out_dir: None,
            parallel: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = io::read_json(path).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the fields that determine the learned parameters.
    /// The output directory, threshold, std flavour and parallelism are left
    /// out, so they can change without invalidating checkpoints.
    pub fn fingerprint(&self) -> String {
        let view = Fingerprinted {
            model: &self.model,
            train: &self.train,
            data: &self.data,
            folds: &self.folds,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Checks every section, that referenced paths exist and that the model
    /// input matches the data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.folds.k < 2 {
            return Err(HarnessError::Config(format!("folds.k must be >= 2, got {}", self.folds.k)));
        }
        if !self.threshold.is_finite() {
            return Err(HarnessError::Config("threshold must be finite".into()));
        }
        let (hours, width) = match &self.data {
            DataSource::Csv { dir, hours } => {
                for f in [io::EVENTS_FILE, io::LABELS_FILE, io::SCHEMA_FILE] {
                    let p = dir.join(f);
                    if !p.is_file() {
                        return Err(HarnessError::Config(format!("missing data file {}", p.display())));
                    }
                }
                let schema = io::read_schema(&dir.join(io::SCHEMA_FILE))?;
                (*hours, schema.encoded_width())
            }
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                (spec.hours, spec.schema().encoded_width())
            }
        };
        if hours != self.model.hours || width != self.model.input_dim {
            return Err(HarnessError::Config(format!(
                "model expects {}x{} inputs, data gives {hours}x{width}",
                self.model.hours, self.model.input_dim
            )));
        }
        Ok(())
    }
}
