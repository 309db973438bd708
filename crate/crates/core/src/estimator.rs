//! Quantile-gradient estimators and the plug-in gradient.
//!
//! The population quantile `τ(θ)` of the conformity scores has gradient
//! `E[∂E/∂θ | E = τ]`. Two estimators of that conditional mean are provided:
//!
//! * [`EstimatorKind::Naive`]: the gradient of the empirical quantile itself,
//!   i.e. the score gradient of the single calibration sample sitting at rank
//!   `⌈αn⌉`. Its covariance does not shrink as `n` grows.
//! * [`EstimatorKind::EpsThreshold`] / [`EstimatorKind::MRanking`]: the mean
//!   score gradient over calibration samples whose score lies within `ε` of
//!   `τ̂`, with `ε` either fixed or chosen so that exactly `m` samples qualify.
//!
//! [`plugin_gradient`] combines the chosen estimate with the loss partials into
//! the full gradient `h′(ℓ̂)(∂ℓ/∂θ + ∂ℓ/∂τ · η̂) + ∂R/∂θ`.

use std::fmt;

use crate::conformal::{by_value_then_index, empirical_quantile, score, ScoreKind};
use crate::error::{Error, Result};
use crate::loss::{h_transform, LossComponents};
use crate::nn::{Example, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    Naive,
    EpsThreshold { epsilon: f64 },
    MRanking { m: usize },
}

impl EstimatorKind {
    pub fn validate(&self, calibration_size: usize) -> Result<()> {
        match *self {
            EstimatorKind::Naive => Ok(()),
            EstimatorKind::EpsThreshold { epsilon } if epsilon > 0.0 && epsilon.is_finite() => Ok(()),
            EstimatorKind::EpsThreshold { epsilon } => Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            ))),
            EstimatorKind::MRanking { m } if m >= 1 && m <= calibration_size => Ok(()),
            EstimatorKind::MRanking { m } => Err(Error::InvalidArgument(format!(
                "m must lie in 1..={calibration_size}, got {m}"
            ))),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Naive => write!(f, "naive"),
            EstimatorKind::EpsThreshold { epsilon } => write!(f, "eps({epsilon})"),
            EstimatorKind::MRanking { m } => write!(f, "mrank({m})"),
        }
    }
}

/// Parses the [`Display`](fmt::Display) form: `naive`, `eps(<ε>)` or `mrank(<m>)`.
impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "naive" {
            return Ok(EstimatorKind::Naive);
        }
        let bad = || Error::InvalidArgument(format!("unknown estimator {s:?}"));
        let (name, arg) = s
            .strip_suffix(')')
            .and_then(|b| b.split_once('('))
            .ok_or_else(bad)?;
        let kind = match name {
            "eps" => EstimatorKind::EpsThreshold {
                epsilon: arg.trim().parse().map_err(|_| bad())?,
            },
            "mrank" => EstimatorKind::MRanking {
                m: arg.trim().parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        Ok(kind)
    }
}

/// Quantile estimate, quantile-gradient estimate and selection diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub eta_hat: Vec<f64>,
    pub n_selected: usize,
    /// Window half-width actually used; zero for the naive estimator.
    pub effective_epsilon: f64,
    pub tau_hat: f64,
}

fn calibration_scores(model: &Model, batch: &[&Example], kind: ScoreKind) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|ex| score(&model.forward(&ex.x)?, ex.y, kind))
        .collect()
}

/// Score gradient of the rank-`⌈αn⌉` calibration sample.
pub fn naive_quantile_grad(
    model: &Model,
    batch_cal: &[&Example],
    alpha: f64,
    kind: ScoreKind,
) -> Result<GradEstimate> {
    if batch_cal.is_empty() {
        return Err(Error::EmptyInput("calibration batch"));
    }
    let scores = calibration_scores(model, batch_cal, kind)?;
    let q = empirical_quantile(&scores, alpha)?;
    Ok(GradEstimate {
        eta_hat: model.score_grad(batch_cal[q.rank_index], kind)?,
        n_selected: 1,
        effective_epsilon: 0.0,
        tau_hat: q.tau,
    })
}

/// Indices with `|score − τ̂| ≤ ε`, ascending.
pub fn select_eps(scores: &[f64], tau_hat: f64, epsilon: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| (*s - tau_hat).abs() <= epsilon)
        .map(|(i, _)| i)
        .collect()
}

/// The `m` indices closest to `τ̂` (ties to the lowest index), ascending, and
/// the `m`-th smallest distance.
pub fn select_m_rank(scores: &[f64], tau_hat: f64, m: usize) -> Result<(Vec<usize>, f64)> {
    if m == 0 || m > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "m must lie in 1..={}, got {m}",
            scores.len()
        )));
    }
    let dist: Vec<f64> = scores.iter().map(|s| (s - tau_hat).abs()).collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.select_nth_unstable_by(m - 1, |&a, &b| by_value_then_index(&dist, a, b));
    let mut chosen = idx[..m].to_vec();
    let effective_epsilon = chosen.iter().map(|&i| dist[i]).fold(0.0, f64::max);
    chosen.sort_unstable();
    Ok((chosen, effective_epsilon))
}

/// Mean score gradient over `selected`; the zero vector when nothing is selected.
pub fn eta_hat(
    model: &Model,
    batch_cal: &[&Example],
    selected: &[usize],
    kind: ScoreKind,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.param_count()];
    if selected.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / selected.len() as f64;
    for &i in selected {
        let ex = batch_cal.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("selected index {i} outside a batch of {}", batch_cal.len()))
        })?;
        model.score_grad_acc(ex, kind, scale, &mut out)?;
    }
    Ok(out)
}

/// Where the selection window is centred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Centering {
    /// The empirical quantile of the calibration batch.
    Estimated,
    /// A known population quantile.
    Fixed(f64),
}

/// Quantile and quantile-gradient estimates from one calibration batch.
pub fn estimate(
    model: &Model,
    batch_cal: &[&Example],
    alpha: f64,
    kind: ScoreKind,
    estimator: EstimatorKind,
) -> Result<GradEstimate> {
    estimate_centered(model, batch_cal, alpha, kind, estimator, Centering::Estimated)
}

/// [`estimate`] with an explicit window centre. `tau_hat` in the result is
/// always the empirical quantile of the batch.
pub fn estimate_centered(
    model: &Model,
    batch_cal: &[&Example],
    alpha: f64,
    kind: ScoreKind,
    estimator: EstimatorKind,
    centering: Centering,
) -> Result<GradEstimate> {
    if batch_cal.is_empty() {
        return Err(Error::EmptyInput("calibration batch"));
    }
    estimator.validate(batch_cal.len())?;
    if estimator == EstimatorKind::Naive {
        return naive_quantile_grad(model, batch_cal, alpha, kind);
    }
    let scores = calibration_scores(model, batch_cal, kind)?;
    let tau_hat = empirical_quantile(&scores, alpha)?.tau;
    let center = match centering {
        Centering::Estimated => tau_hat,
        Centering::Fixed(t) => t,
    };
    let (selected, effective_epsilon) = match estimator {
        EstimatorKind::EpsThreshold { epsilon } => (select_eps(&scores, center, epsilon), epsilon),
        EstimatorKind::MRanking { m } => select_m_rank(&scores, center, m)?,
        EstimatorKind::Naive => unreachable!(),
    };
    Ok(GradEstimate {
        eta_hat: eta_hat(model, batch_cal, &selected, kind)?,
        n_selected: selected.len(),
        effective_epsilon,
        tau_hat,
    })
}

/// `h′(ℓ̂) · (∂ℓ/∂θ + ∂ℓ/∂τ · η̂) + reg`.
pub fn plugin_gradient(comp: &LossComponents, eta: &GradEstimate, reg: &[f64]) -> Result<Vec<f64>> {
    let p = comp.dl_dtheta_bar.len();
    for (what, len) in [("quantile gradient", eta.eta_hat.len()), ("regularizer gradient", reg.len())] {
        if len != p {
            return Err(Error::DimensionMismatch {
                what,
                expected: p,
                actual: len,
            });
        }
    }
    let (_, h_prime) = h_transform(comp.ell_bar)?;
    let dtau = comp.dl_dtau_bar;
    Ok(comp
        .dl_dtheta_bar
        .iter()
        .zip(&eta.eta_hat)
        .zip(reg)
        .map(|((&a, &e), &r)| h_prime * (a + dtau * e) + r)
        .collect())
}
