//! Evaluation over random calibration/test splits, Monte-Carlo oracles for the
//! quantile gradient, and the estimator bias/variance study.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::conformal::{
    all_scores, empirical_quantile, quantile_rank, score, set_metrics, thr_set, thr_set_from_scores,
    ConformalConfig, ScoreKind,
};
use crate::data::{Dataset, GmmSpec};
use crate::error::{Error, Result};
use crate::estimator::{estimate_centered, Centering, EstimatorKind};
use crate::loss::{h_transform, mean_loss};
use crate::nn::{Example, Model};
use crate::rng;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Normal-approximation binomial interval `p ± z·sqrt(p(1−p)/n)`.
pub fn binomial_interval(p: f64, n: usize, z: f64) -> (f64, f64) {
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.5758293035489004;

/// Cheap single-split metrics used at the end of each training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutMetrics {
    /// `log` of the smooth size loss on the test set at the calibrated `τ̂`.
    pub loss: f64,
    pub accuracy: f64,
    pub avg_size: f64,
    pub coverage: f64,
}

pub fn holdout_metrics(model: &Model, cal: &Dataset, test: &Dataset, conf: &ConformalConfig) -> Result<HoldoutMetrics> {
    if cal.is_empty() {
        return Err(Error::EmptyInput("calibration set"));
    }
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let cal_scores = cal
        .examples
        .iter()
        .map(|ex| score(&model.forward(&ex.x)?, ex.y, conf.score_kind))
        .collect::<Result<Vec<_>>>()?;
    let tau = empirical_quantile(&cal_scores, conf.alpha)?.tau;
    let mut sets = Vec::with_capacity(test.len());
    let mut correct = 0usize;
    for ex in &test.examples {
        let logits = model.forward(&ex.x)?;
        correct += usize::from(argmax(&logits) == ex.y);
        sets.push(thr_set(&logits, tau, conf.score_kind));
    }
    let m = set_metrics(&sets, &test.labels())?;
    let (loss, _) = h_transform(mean_loss(model, tau, &test.refs(), conf)?)?;
    Ok(HoldoutMetrics {
        loss,
        accuracy: correct as f64 / test.len() as f64,
        avg_size: m.avg_size,
        coverage: m.coverage,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub trial: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub class_coverage: Vec<f64>,
    pub class_size: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub alpha: f64,
    pub trials: usize,
    /// Argmax accuracy on the original test pool.
    pub accuracy: f64,
    pub coverage: f64,
    pub coverage_std: f64,
    pub avg_set_size: f64,
    pub avg_set_size_std: f64,
    /// Per-class values averaged over the trials in which the class occurs.
    pub class_coverage: Vec<f64>,
    pub class_size: Vec<f64>,
    pub per_trial: Vec<TrialMetrics>,
}

impl EvalReport {
    pub fn write_trials_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "coverage", "avg_size"])?;
        for t in &self.per_trial {
            w.write_record(&[t.trial.to_string(), t.coverage.to_string(), t.avg_size.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_class_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "coverage", "avg_size"])?;
        for (k, (c, s)) in self.class_coverage.iter().zip(&self.class_size).enumerate() {
            w.write_record(&[k.to_string(), c.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csvs(&self, trials_path: impl AsRef<Path>, class_path: impl AsRef<Path>) -> Result<()> {
        self.write_trials_csv(std::fs::File::create(trials_path)?)?;
        self.write_class_csv(std::fs::File::create(class_path)?)
    }
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Conformal evaluation of a trained model over `trials` random re-splits of
/// the merged pools, keeping the original pool sizes.
pub fn evaluate(
    model: &Model,
    cal_pool: &Dataset,
    test_pool: &Dataset,
    alpha: f64,
    trials: usize,
    seed: u64,
    kind: ScoreKind,
) -> Result<EvalReport> {
    let rows = |ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        ds.examples
            .par_iter()
            .map(|ex| Ok(all_scores(&model.forward(&ex.x)?, kind)))
            .collect()
    };
    evaluate_scores(&rows(cal_pool)?, &cal_pool.labels(), &rows(test_pool)?, &test_pool.labels(), alpha, trials, seed)
}

/// [`evaluate`] on precomputed per-class score rows. Accuracy is the argmax of
/// the test rows, which agrees with the logit argmax for every [`ScoreKind`].
pub fn evaluate_scores(
    cal_scores: &[Vec<f64>],
    cal_labels: &[usize],
    test_scores: &[Vec<f64>],
    test_labels: &[usize],
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if cal_scores.is_empty() {
        return Err(Error::EmptyInput("calibration pool"));
    }
    if test_scores.is_empty() {
        return Err(Error::EmptyInput("test pool"));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if cal_scores.len() != cal_labels.len() || test_scores.len() != test_labels.len() {
        return Err(Error::LengthMismatch("score rows and labels differ in length".into()));
    }
    let k = cal_scores[0].len();
    let scores: Vec<&[f64]> = cal_scores.iter().chain(test_scores).map(|r| r.as_slice()).collect();
    let labels: Vec<usize> = cal_labels.iter().chain(test_labels).copied().collect();
    for (r, &y) in scores.iter().zip(&labels) {
        if r.len() != k {
            return Err(Error::DimensionMismatch {
                what: "score row",
                expected: k,
                actual: r.len(),
            });
        }
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, num_classes: k });
        }
    }
    let accuracy = test_scores
        .iter()
        .zip(test_labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count() as f64
        / test_scores.len() as f64;

    let n_cal = cal_scores.len();
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| {
            let perm = rng::permutation(&mut rng::stream(seed, "eval", t as u64), scores.len());
            let (cal_idx, test_idx) = perm.split_at(n_cal);
            let cal_true: Vec<f64> = cal_idx.iter().map(|&i| scores[i][labels[i]]).collect();
            let tau = empirical_quantile(&cal_true, alpha)?.tau;
            let sets: Vec<_> = test_idx.iter().map(|&i| thr_set_from_scores(scores[i], tau)).collect();
            let ys: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
            let m = set_metrics(&sets, &ys)?;
            Ok(TrialMetrics {
                trial: t,
                coverage: m.coverage,
                avg_size: m.avg_size,
                class_coverage: m.class_coverage,
                class_size: m.class_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cov: Vec<f64> = per_trial.iter().map(|t| t.coverage).collect();
    let size: Vec<f64> = per_trial.iter().map(|t| t.avg_size).collect();
    Ok(EvalReport {
        alpha,
        trials,
        accuracy,
        coverage: mean(&cov),
        coverage_std: std_dev(&cov),
        avg_set_size: mean(&size),
        avg_set_size_std: std_dev(&size),
        class_coverage: (0..k).map(|c| mean_finite(per_trial.iter().map(|t| t.class_coverage[c]))).collect(),
        class_size: (0..k).map(|c| mean_finite(per_trial.iter().map(|t| t.class_size[c]))).collect(),
        per_trial,
    })
}

pub const ORACLE_MIN_DRAWS: usize = 100_000;
/// Sub-batches used to estimate the oracle's Monte-Carlo error.
pub const ORACLE_CHUNKS: usize = 10;

/// Finite-difference step for coordinate value `theta_j`.
pub fn oracle_step(theta_j: f64) -> f64 {
    1e-3 * theta_j.abs().max(1.0)
}

/// Large-sample reference value of `∂τ/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleGrad {
    pub eta: Vec<f64>,
    /// Per-coordinate Monte-Carlo standard error.
    pub mc_err: Vec<f64>,
    /// Population quantile estimate at the unperturbed parameters.
    pub tau: f64,
    pub n_mc: usize,
}

impl OracleGrad {
    pub fn norm(&self) -> f64 {
        self.eta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn quantile_of(scores: &[f64], alpha: f64) -> Result<f64> {
    Ok(empirical_quantile(scores, alpha)?.tau)
}

/// Central differences of the empirical `α`-quantile of `scores_at(θ)`.
///
/// `scores_at` must evaluate the same draws at every `θ`; those common random
/// numbers make the difference quotient far less noisy than the quantiles.
pub fn oracle_from_scores<F>(theta: &[f64], alpha: f64, mut scores_at: F) -> Result<OracleGrad>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let base = scores_at(theta)?;
    let n = base.len();
    if n < ORACLE_MIN_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "oracle needs at least {ORACLE_MIN_DRAWS} draws, got {n}"
        )));
    }
    let tau = quantile_of(&base, alpha)?;
    let chunk = n / ORACLE_CHUNKS;
    let mut eta = Vec::with_capacity(theta.len());
    let mut mc_err = Vec::with_capacity(theta.len());
    let mut shifted = theta.to_vec();
    for j in 0..theta.len() {
        let d = oracle_step(theta[j]);
        shifted[j] = theta[j] + d;
        let plus = scores_at(&shifted)?;
        shifted[j] = theta[j] - d;
        let minus = scores_at(&shifted)?;
        shifted[j] = theta[j];
        if plus.len() != n || minus.len() != n {
            return Err(Error::LengthMismatch("oracle draws changed between evaluations".into()));
        }
        eta.push((quantile_of(&plus, alpha)? - quantile_of(&minus, alpha)?) / (2.0 * d));
        let parts = (0..ORACLE_CHUNKS)
            .map(|c| {
                let r = c * chunk..(c + 1) * chunk;
                Ok((quantile_of(&plus[r.clone()], alpha)? - quantile_of(&minus[r], alpha)?) / (2.0 * d))
            })
            .collect::<Result<Vec<f64>>>()?;
        mc_err.push(std_dev(&parts) / (ORACLE_CHUNKS as f64).sqrt());
    }
    Ok(OracleGrad { eta, mc_err, tau, n_mc: n })
}

fn scores_with_params(model: &Model, params: &[f64], draws: &[Example], kind: ScoreKind) -> Result<Vec<f64>> {
    let m = Model::new(model.layers().to_vec(), params.to_vec())?;
    draws
        .par_iter()
        .map(|ex| score(&m.forward(&ex.x)?, ex.y, kind))
        .collect()
}

/// `n` draws from the mixture on the oracle stream of `seed`.
pub fn oracle_draws(gmm: &GmmSpec, n: usize, seed: u64) -> Result<Vec<Example>> {
    gmm.validate()?;
    Ok(gmm.sample_n(n, &mut rng::stream(seed, "oracle", 0)))
}

/// Oracle `∂τ/∂θ` of `model` under the mixture, from `n_mc` common draws.
pub fn oracle_quantile_grad(
    model: &Model,
    gmm: &GmmSpec,
    alpha: f64,
    kind: ScoreKind,
    n_mc: usize,
    seed: u64,
) -> Result<OracleGrad> {
    if n_mc < ORACLE_MIN_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "oracle needs at least {ORACLE_MIN_DRAWS} draws, got {n_mc}"
        )));
    }
    oracle_on_draws(model, &oracle_draws(gmm, n_mc, seed)?, alpha, kind)
}

pub fn oracle_on_draws(model: &Model, draws: &[Example], alpha: f64, kind: ScoreKind) -> Result<OracleGrad> {
    oracle_from_scores(model.params(), alpha, |p| scores_with_params(model, p, draws, kind))
}

/// Population quantities of the window `|E − τ| ≤ ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub tau: f64,
    pub epsilon: f64,
    pub p_eps: f64,
    pub q_eps: f64,
    /// Mean score gradient inside the window.
    pub eta_eps: Vec<f64>,
    /// Monte-Carlo standard error of each `eta_eps` coordinate.
    pub eta_eps_se: Vec<f64>,
    /// Score-gradient covariance inside the window, row-major.
    pub sigma_eps: Vec<f64>,
    pub n_window: usize,
    pub n_draws: usize,
}

impl WindowStats {
    pub fn dim(&self) -> usize {
        self.eta_eps.len()
    }

    pub fn sigma_trace(&self) -> f64 {
        let p = self.dim();
        (0..p).map(|i| self.sigma_eps[i * p + i]).sum()
    }

    /// `(1 − q^n) η_ε`, the mean of the window estimator at batch size `n`.
    pub fn bias_target(&self, n: usize) -> Vec<f64> {
        let f = 1.0 - self.q_eps.powi(n as i32);
        self.eta_eps.iter().map(|e| f * e).collect()
    }

    /// Trace of `2Σ_ε/(p_ε n) + q_ε^n η_ε η_εᵀ`.
    pub fn covariance_bound(&self, n: usize) -> f64 {
        let norm2: f64 = self.eta_eps.iter().map(|e| e * e).sum();
        2.0 * self.sigma_trace() / (self.p_eps * n as f64) + self.q_eps.powi(n as i32) * norm2
    }
}

pub fn window_stats(model: &Model, draws: &[Example], tau: f64, epsilon: f64, kind: ScoreKind) -> Result<WindowStats> {
    if draws.is_empty() {
        return Err(Error::EmptyInput("window draws"));
    }
    let scores = scores_with_params(model, model.params(), draws, kind)?;
    let inside: Vec<&Example> = draws
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| (s - tau).abs() <= epsilon)
        .map(|(ex, _)| ex)
        .collect();
    if inside.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "window of half-width {epsilon} around {tau} holds {} draws",
            inside.len()
        )));
    }
    let grads = inside
        .par_iter()
        .map(|ex| model.score_grad(ex, kind))
        .collect::<Result<Vec<_>>>()?;
    let p = model.param_count();
    let nw = grads.len() as f64;
    let mut mu = vec![0.0; p];
    for g in &grads {
        for (m, v) in mu.iter_mut().zip(g) {
            *m += v / nw;
        }
    }
    let mut sigma = vec![0.0; p * p];
    for g in &grads {
        for i in 0..p {
            let di = g[i] - mu[i];
            for j in 0..p {
                sigma[i * p + j] += di * (g[j] - mu[j]);
            }
        }
    }
    for s in &mut sigma {
        *s /= nw - 1.0;
    }
    let p_eps = nw / draws.len() as f64;
    Ok(WindowStats {
        tau,
        epsilon,
        p_eps,
        q_eps: 1.0 - p_eps,
        eta_eps_se: (0..p).map(|i| (sigma[i * p + i] / nw).sqrt()).collect(),
        eta_eps: mu,
        sigma_eps: sigma,
        n_window: grads.len(),
        n_draws: draws.len(),
    })
}

/// An estimator as run in the study, optionally centred on the oracle `τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyEstimator {
    pub kind: EstimatorKind,
    pub oracle_centered: bool,
}

const ORACLE_SUFFIX: &str = "@oracle-tau";

impl fmt::Display for StudyEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if self.oracle_centered {
            f.write_str(ORACLE_SUFFIX)?;
        }
        Ok(())
    }
}

impl FromStr for StudyEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, oracle_centered) = match s.strip_suffix(ORACLE_SUFFIX) {
            Some(b) => (b, true),
            None => (s, false),
        };
        Ok(StudyEstimator {
            kind: body.parse()?,
            oracle_centered,
        })
    }
}

impl From<EstimatorKind> for StudyEstimator {
    fn from(kind: EstimatorKind) -> Self {
        StudyEstimator {
            kind,
            oracle_centered: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub alpha: f64,
    pub score_kind: ScoreKind,
    pub estimators: Vec<StudyEstimator>,
    pub batch_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Draws behind the oracle and the window statistics.
    pub n_mc: usize,
    /// Half-width of the window whose population statistics are reported.
    pub window_epsilon: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let eps = EstimatorKind::EpsThreshold { epsilon: 1.0 };
        StudyConfig {
            alpha: 0.05,
            score_kind: ScoreKind::LogProbability,
            estimators: vec![
                EstimatorKind::Naive.into(),
                EstimatorKind::MRanking { m: 6 }.into(),
                eps.into(),
                StudyEstimator {
                    kind: eps,
                    oracle_centered: true,
                },
            ],
            batch_sizes: vec![50, 100, 200, 500, 1000],
            trials: 1000,
            seed: 0,
            n_mc: 1_000_000,
            window_epsilon: 1.0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.trials < 100 {
            return bad(format!("the study needs at least 100 trials, got {}", self.trials));
        }
        if self.estimators.is_empty() {
            return bad("no estimators given".into());
        }
        let Some(&smallest) = self.batch_sizes.iter().min() else {
            return bad("no batch sizes given".into());
        };
        if smallest == 0 {
            return bad("batch sizes must be positive".into());
        }
        for e in &self.estimators {
            e.kind.validate(smallest).map_err(|err| Error::Config(format!("{e}: {err}")))?;
        }
        if self.n_mc < ORACLE_MIN_DRAWS {
            return bad(format!("n_mc must be at least {ORACLE_MIN_DRAWS}, got {}", self.n_mc));
        }
        if !(self.window_epsilon > 0.0 && self.window_epsilon.is_finite()) {
            return bad(format!("window epsilon must be positive, got {}", self.window_epsilon));
        }
        Ok(())
    }

    /// The fixed-width, oracle-centred estimator the window statistics describe.
    pub fn reference_estimator(&self) -> StudyEstimator {
        StudyEstimator {
            kind: EstimatorKind::EpsThreshold {
                epsilon: self.window_epsilon,
            },
            oracle_centered: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub estimator: StudyEstimator,
    pub n: usize,
    pub mean: Vec<f64>,
    /// Standard error of each `mean` coordinate.
    pub mean_se: Vec<f64>,
    /// `mean − oracle η`.
    pub bias: Vec<f64>,
    pub bias_norm: f64,
    pub cov_trace: f64,
    /// Standard error of `cov_trace`.
    pub mc_err: f64,
    pub mean_selected: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub oracle: OracleGrad,
    pub window: WindowStats,
    pub rows: Vec<StudyRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub const SLOPE_RANGE: (f64, f64) = (-1.35, -0.65);

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::InvalidArgument("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Largest `|mean − (1−q^n)η_ε|` in units of the combined standard error.
pub fn bias_identity_z(row: &StudyRow, window: &WindowStats) -> f64 {
    let f = 1.0 - window.q_eps.powi(row.n as i32);
    let target = window.bias_target(row.n);
    (0..row.mean.len())
        .map(|j| {
            let se = (row.mean_se[j].powi(2) + (f * window.eta_eps_se[j]).powi(2)).sqrt();
            (row.mean[j] - target[j]).abs() / se
        })
        .fold(0.0, f64::max)
}

impl StudyReport {
    pub fn row(&self, estimator: StudyEstimator, n: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n)
    }

    /// `cov_trace(n_large) / cov_trace(n_small)` for one estimator.
    pub fn variance_ratio(&self, estimator: StudyEstimator, n_small: usize, n_large: usize) -> Option<f64> {
        Some(self.row(estimator, n_large)?.cov_trace / self.row(estimator, n_small)?.cov_trace)
    }

    /// Bias identity, covariance bound and slope checks for the reference estimator.
    pub fn checks(&self) -> Vec<Check> {
        let reference = self.config.reference_estimator();
        let rows: Vec<&StudyRow> = self.rows.iter().filter(|r| r.estimator == reference).collect();
        let mut out = Vec::new();
        for r in &rows {
            let z = bias_identity_z(r, &self.window);
            out.push(Check {
                name: format!("window-bias n={}", r.n),
                passed: z <= 3.0,
                detail: format!("max |mean - (1-q^n) eta_eps| = {z:.3} standard errors (limit 3)"),
            });
            let bound = self.window.covariance_bound(r.n);
            out.push(Check {
                name: format!("window-bound n={}", r.n),
                passed: r.cov_trace <= bound + 3.0 * r.mc_err,
                detail: format!("trace {:.6e} vs bound {:.6e} + 3 x {:.3e}", r.cov_trace, bound, r.mc_err),
            });
        }
        if rows.len() >= 2 {
            let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.cov_trace).collect();
            let (lo, hi) = SLOPE_RANGE;
            out.push(match loglog_slope(&xs, &ys) {
                Ok(s) => Check {
                    name: "window-slope".into(),
                    passed: (lo..=hi).contains(&s),
                    detail: format!("slope {s:.4} (range [{lo}, {hi}])"),
                },
                Err(e) => Check {
                    name: "window-slope".into(),
                    passed: false,
                    detail: e.to_string(),
                },
            });
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "n", "bias_norm", "cov_trace", "mc_err"])?;
        for r in &self.rows {
            w.write_record(&[
                r.estimator.to_string(),
                r.n.to_string(),
                r.bias_norm.to_string(),
                r.cov_trace.to_string(),
                r.mc_err.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Mean, per-coordinate standard error, covariance trace and its standard error.
fn summarize(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let t = samples.len() as f64;
    let p = samples[0].len();
    let mut mu = vec![0.0; p];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= t);
    let sq: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(&mu).map(|(v, m)| (v - m) * (v - m)).sum())
        .collect();
    let mut var = vec![0.0; p];
    for s in samples {
        for j in 0..p {
            var[j] += (s[j] - mu[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= t - 1.0);
    let trace: f64 = var.iter().sum();
    let se = var.iter().map(|v| (v / t).sqrt()).collect();
    (mu, se, trace, std_dev(&sq) / t.sqrt())
}

/// Bias and covariance of each estimator at each batch size, measured against
/// the oracle over `trials` independent batches per cell.
pub fn estimator_study(model: &Model, gmm: &GmmSpec, config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let (oracle, window) = {
        let draws = oracle_draws(gmm, config.n_mc, config.seed)?;
        let oracle = oracle_on_draws(model, &draws, config.alpha, config.score_kind)?;
        let window = window_stats(model, &draws, oracle.tau, config.window_epsilon, config.score_kind)?;
        (oracle, window)
    };
    let mut rows = Vec::new();
    for &n in &config.batch_sizes {
        let stream_name = format!("study/n={n}");
        for &est in &config.estimators {
            let centering = if est.oracle_centered {
                Centering::Fixed(oracle.tau)
            } else {
                Centering::Estimated
            };
            let samples = (0..config.trials)
                .into_par_iter()
                .map(|t| {
                    let batch = gmm.sample_n(n, &mut rng::stream(config.seed, &stream_name, t as u64));
                    let refs: Vec<&Example> = batch.iter().collect();
                    let g = estimate_centered(model, &refs, config.alpha, config.score_kind, est.kind, centering)?;
                    Ok((g.eta_hat, g.n_selected))
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_selected = samples.iter().map(|s| s.1 as f64).sum::<f64>() / samples.len() as f64;
            let etas: Vec<Vec<f64>> = samples.into_iter().map(|s| s.0).collect();
            let (mean, mean_se, cov_trace, mc_err) = summarize(&etas);
            let bias: Vec<f64> = mean.iter().zip(&oracle.eta).map(|(m, o)| m - o).collect();
            rows.push(StudyRow {
                estimator: est,
                n,
                bias_norm: bias.iter().map(|b| b * b).sum::<f64>().sqrt(),
                mean,
                mean_se,
                bias,
                cov_trace,
                mc_err,
                mean_selected,
            });
        }
    }
    Ok(StudyReport {
        config: config.clone(),
        oracle,
        window,
        rows,
    })
}

/// One large batch against the oracle, with `ε` set to the `distance_level`
/// quantile of `|E − τ̂|` within the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyCheck {
    pub estimate: Vec<f64>,
    pub oracle: OracleGrad,
    pub epsilon: f64,
    pub n_selected: usize,
    pub rel_err: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn quantile_grad_consistency(
    model: &Model,
    gmm: &GmmSpec,
    alpha: f64,
    kind: ScoreKind,
    n: usize,
    distance_level: f64,
    n_mc: usize,
    seed: u64,
) -> Result<ConsistencyCheck> {
    gmm.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("consistency batch"));
    }
    let oracle = oracle_quantile_grad(model, gmm, alpha, kind, n_mc, seed)?;
    let batch = gmm.sample_n(n, &mut rng::stream(seed, "consistency", 0));
    let refs: Vec<&Example> = batch.iter().collect();
    let scores = scores_with_params(model, model.params(), &batch, kind)?;
    let tau_hat = empirical_quantile(&scores, alpha)?.tau;
    let mut dist: Vec<f64> = scores.iter().map(|s| (s - tau_hat).abs()).collect();
    let k = quantile_rank(distance_level, n);
    let (_, &mut epsilon, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
    let g = estimate_centered(
        model,
        &refs,
        alpha,
        kind,
        EstimatorKind::EpsThreshold { epsilon },
        Centering::Estimated,
    )?;
    let diff: f64 = g.eta_hat.iter().zip(&oracle.eta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(ConsistencyCheck {
        rel_err: diff / oracle.norm(),
        n_selected: g.n_selected,
        estimate: g.eta_hat,
        epsilon,
        oracle,
    })
}

/// Parameters of the linear 2→3 model used by the study and its fixtures.
pub const REFERENCE_THETA: [f64; 9] = [0.19, -0.33, -0.65, -0.68, 0.44, 0.58, 0.15, 0.32, 0.06];

pub fn reference_linear_model() -> Model {
    Model::new(Model::linear_topology(2, 3), REFERENCE_THETA.to_vec()).expect("fixed topology")
}
