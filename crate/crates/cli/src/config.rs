//! Run configuration: one TOML file with a section per module.
//!
//! Every section is optional and falls back to the defaults of the matching
//! library type; unknown sections and keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crm::eval::StudyEstimator;
use crm::{ConformalConfig, EstimatorKind, GmmSpec, ScoreKind, StudyConfig, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub gmm: GmmSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub conformal: ConformalSection,
    pub eval: EvalSection,
    pub study: StudySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Gmm,
    Cache,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// IDX directory, resolved against `CRM_DATA_DIR` when relative.
    pub dir: PathBuf,
    /// Dataset cache written by `gen-gmm`.
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub cal_size: usize,
    /// Ignored for MNIST, whose test set is the separate t10k files.
    pub test_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Gmm,
            dir: PathBuf::from("mnist"),
            path: None,
            train_size: 6000,
            cal_size: 2000,
            test_size: 2000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub num_samples: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for GmmSection {
    fn default() -> Self {
        let d = GmmSpec::default();
        GmmSection {
            means: d.means,
            variances: d.variances,
            weights: d.weights,
            num_samples: d.num_samples,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden ReLU widths; empty for a linear model.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub estimator: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            batch_size: d.batch_size,
            epochs: d.epochs,
            learning_rate: d.base_lr,
            momentum: d.momentum,
            estimator: d.estimator.to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformalSection {
    pub alpha: f64,
    pub temperature: f64,
    pub target_size: usize,
    pub size_weight: f64,
    pub reg_weight: f64,
    pub score: String,
    pub base_loss_weight: f64,
}

impl Default for ConformalSection {
    fn default() -> Self {
        let d = ConformalConfig::default();
        ConformalSection {
            alpha: d.alpha,
            temperature: d.temperature,
            target_size: d.target_size,
            size_weight: d.size_weight,
            reg_weight: d.reg_weight,
            score: d.score_kind.to_string(),
            base_loss_weight: d.base_loss_weight,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { trials: 10 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub alpha: f64,
    pub score: String,
    pub estimators: Vec<String>,
    pub batch_sizes: Vec<usize>,
    pub trials: usize,
    pub n_mc: usize,
    pub window_epsilon: f64,
    /// Linear-model parameters (weights row-major, then biases); the
    /// reference model when absent.
    pub theta: Option<Vec<f64>>,
}

impl Default for StudySection {
    fn default() -> Self {
        let d = StudyConfig::default();
        StudySection {
            alpha: d.alpha,
            score: d.score_kind.to_string(),
            estimators: d.estimators.iter().map(|e| e.to_string()).collect(),
            batch_sizes: d.batch_sizes,
            trials: d.trials,
            n_mc: d.n_mc,
            window_epsilon: d.window_epsilon,
            theta: None,
        }
    }
}

fn invalid(path: &Path, message: impl ToString) -> Error {
    Error::ConfigParse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::ConfigNotFound(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(origin, e.message()))?;
        // resolve every string-typed field now so a bad value fails before any work
        cfg.train_config(origin)?;
        cfg.study_config(origin)?;
        Ok(cfg)
    }

    pub fn conformal_config(&self, origin: &Path) -> Result<ConformalConfig> {
        let c = &self.conformal;
        let cfg = ConformalConfig {
            alpha: c.alpha,
            temperature: c.temperature,
            target_size: c.target_size,
            size_weight: c.size_weight,
            reg_weight: c.reg_weight,
            score_kind: parse_score(&c.score, origin)?,
            base_loss_weight: c.base_loss_weight,
        };
        cfg.validate().map_err(|e| invalid(origin, e))?;
        Ok(cfg)
    }

    pub fn train_config(&self, origin: &Path) -> Result<TrainConfig> {
        let t = &self.train;
        let estimator: EstimatorKind = t.estimator.parse().map_err(|e| invalid(origin, e))?;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.learning_rate,
            momentum: t.momentum,
            seed: self.run.seed,
            estimator,
            conformal: self.conformal_config(origin)?,
        };
        cfg.validate().map_err(|e| invalid(origin, e))?;
        Ok(cfg)
    }

    pub fn gmm_spec(&self) -> GmmSpec {
        let g = &self.gmm;
        GmmSpec {
            means: g.means.clone(),
            variances: g.variances.clone(),
            weights: g.weights.clone(),
            num_samples: g.num_samples,
            seed: g.seed.unwrap_or(self.run.seed),
        }
    }

    pub fn study_config(&self, origin: &Path) -> Result<StudyConfig> {
        let s = &self.study;
        let estimators = s
            .estimators
            .iter()
            .map(|e| e.parse::<StudyEstimator>())
            .collect::<crm::Result<Vec<_>>>()
            .map_err(|e| invalid(origin, e))?;
        let cfg = StudyConfig {
            alpha: s.alpha,
            score_kind: parse_score(&s.score, origin)?,
            estimators,
            batch_sizes: s.batch_sizes.clone(),
            trials: s.trials,
            seed: self.run.seed,
            n_mc: s.n_mc,
            window_epsilon: s.window_epsilon,
        };
        cfg.validate().map_err(|e| invalid(origin, e))?;
        Ok(cfg)
    }

    /// Applies `--seed`; an explicit GMM seed in the file still wins.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        self
    }
}

fn parse_score(s: &str, origin: &Path) -> Result<ScoreKind> {
    s.parse().map_err(|e: crm::Error| invalid(origin, e))
}
