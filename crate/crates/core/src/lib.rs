//! Conformal risk minimization.
//!
//! Trains classifiers to produce small conformal prediction sets by descending
//! a smoothed set-size loss through the conformal quantile. The gradient of
//! that quantile is estimated either from the single order-statistic sample
//! ([`EstimatorKind::Naive`]) or, with far lower variance, by averaging the
//! score gradients of calibration samples near the empirical quantile
//! ([`EstimatorKind::EpsThreshold`], [`EstimatorKind::MRanking`]).
//!
//! ```
//! use crm::{conformal, Model, Example, ScoreKind};
//!
//! let model = Model::init(Model::linear_topology(2, 3), 0).unwrap();
//! let cal: Vec<Example> = (0..20).map(|i| Example::new(vec![i as f64 * 0.1, 1.0], i % 3)).collect();
//! let scores: Vec<f64> = cal
//!     .iter()
//!     .map(|ex| conformal::score(&model.forward(&ex.x).unwrap(), ex.y, ScoreKind::LogProbability).unwrap())
//!     .collect();
//! let q = conformal::empirical_quantile(&scores, 0.1).unwrap();
//! let set = conformal::thr_set(&model.forward(&[0.5, 1.0]).unwrap(), q.tau, ScoreKind::LogProbability);
//! assert!(set.len() <= 3);
//! ```

pub mod conformal;
mod container;
pub mod data;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use conformal::{ConformalConfig, PredictionSet, ScoreKind};
pub use data::{Dataset, GmmSpec};
pub use error::{Error, Result};
pub use estimator::{EstimatorKind, GradEstimate};
pub use eval::{EvalReport, StudyConfig, StudyReport};
pub use nn::{Activation, Example, LayerSpec, Model};
pub use trainer::{TrainConfig, TrainHistory};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scores-and-sets.md")]
    mod scores_and_sets {}
    #[doc = include_str!("../../../book/src/size-loss.md")]
    mod size_loss {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
