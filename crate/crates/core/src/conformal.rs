//! Conformity scores, empirical quantiles and threshold prediction sets.
//!
//! The threshold (THR) predictor keeps every label whose conformity score is at
//! least `τ`. Calibrating `τ` as the `⌈αn⌉`-th smallest true-label score of `n`
//! exchangeable calibration points gives marginal coverage `≥ 1 − α`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreKind {
    /// `softmax(f_θ(x))_y`
    Probability,
    /// `f_θ(x)_y`
    Logit,
    /// `log softmax(f_θ(x))_y`
    #[default]
    LogProbability,
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(ScoreKind::Probability),
            "logit" => Ok(ScoreKind::Logit),
            "log_probability" => Ok(ScoreKind::LogProbability),
            other => Err(Error::Config(format!(
                "unknown score kind {other:?} (expected probability, logit or log_probability)"
            ))),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Probability => "probability",
            ScoreKind::Logit => "logit",
            ScoreKind::LogProbability => "log_probability",
        })
    }
}

/// Conformal training and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalConfig {
    /// Miscoverage rate α.
    pub alpha: f64,
    /// Sigmoid temperature of the smoothed set membership.
    pub temperature: f64,
    /// Target set size κ of the hinge size loss.
    pub target_size: usize,
    /// Multiplier on the size loss.
    pub size_weight: f64,
    /// λ of the L2 regularizer `λ‖θ‖²`.
    pub reg_weight: f64,
    pub score_kind: ScoreKind,
    /// Weight of an optional cross-entropy term on the prediction half. Off by default.
    pub base_loss_weight: f64,
}

impl Default for ConformalConfig {
    /// The MNIST column of the reference hyper-parameter table.
    fn default() -> Self {
        ConformalConfig {
            alpha: 0.01,
            temperature: 0.5,
            target_size: 1,
            size_weight: 0.01,
            reg_weight: 0.0005,
            score_kind: ScoreKind::LogProbability,
            base_loss_weight: 0.0,
        }
    }
}

impl ConformalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("size_weight", self.size_weight),
            ("reg_weight", self.reg_weight),
            ("base_loss_weight", self.base_loss_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Max-stabilized log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: k,
        });
    }
    Ok(())
}

/// Conformity score `E_θ(x, y)` from the logits of `x`.
pub fn score(logits: &[f64], y: usize, kind: ScoreKind) -> Result<f64> {
    check_label(y, logits.len())?;
    Ok(match kind {
        ScoreKind::Logit => logits[y],
        ScoreKind::Probability => softmax(logits)[y],
        ScoreKind::LogProbability => log_softmax(logits)[y],
    })
}

/// Scores of every label.
pub fn all_scores(logits: &[f64], kind: ScoreKind) -> Vec<f64> {
    match kind {
        ScoreKind::Logit => logits.to_vec(),
        ScoreKind::Probability => softmax(logits),
        ScoreKind::LogProbability => log_softmax(logits),
    }
}

/// `Σ_k weights_k · ∂E_k/∂logits`, the logit-space cotangent of a weighted sum of scores.
pub fn score_cotangent(logits: &[f64], weights: &[f64], kind: ScoreKind) -> Vec<f64> {
    debug_assert_eq!(logits.len(), weights.len());
    match kind {
        ScoreKind::Logit => weights.to_vec(),
        ScoreKind::LogProbability => {
            // ∂ log π_k/∂z_j = δ_kj − π_j
            let p = softmax(logits);
            let total: f64 = weights.iter().sum();
            weights.iter().zip(&p).map(|(w, pj)| w - pj * total).collect()
        }
        ScoreKind::Probability => {
            // ∂π_k/∂z_j = π_k (δ_kj − π_j)
            let p = softmax(logits);
            let wp: f64 = weights.iter().zip(&p).map(|(w, pk)| w * pk).sum();
            weights.iter().zip(&p).map(|(w, pj)| pj * (w - wp)).collect()
        }
    }
}

/// The `⌈αn⌉`-th order statistic and the sample realizing it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub tau: f64,
    pub rank_index: usize,
}

/// `⌈αn⌉` clamped to `1..=n`.
pub fn quantile_rank(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64).ceil() as usize).clamp(1, n)
}

/// `τ̂ = E_(⌈αn⌉)`; ties resolve to the lowest original index.
pub fn empirical_quantile(scores: &[f64], alpha: f64) -> Result<Quantile> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("calibration scores"));
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let k = quantile_rank(alpha, scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let (_, &mut rank_index, _) =
        idx.select_nth_unstable_by(k - 1, |&a, &b| by_value_then_index(scores, a, b));
    Ok(Quantile {
        tau: scores[rank_index],
        rank_index,
    })
}

pub(crate) fn by_value_then_index(v: &[f64], a: usize, b: usize) -> Ordering {
    v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Label set as a bitmask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    words: Vec<u64>,
    num_classes: usize,
}

impl PredictionSet {
    pub fn empty(num_classes: usize) -> Self {
        PredictionSet {
            words: vec![0; num_classes.div_ceil(64)],
            num_classes,
        }
    }

    pub fn from_labels(num_classes: usize, labels: &[usize]) -> Result<Self> {
        let mut s = Self::empty(num_classes);
        for &y in labels {
            check_label(y, num_classes)?;
            s.insert(y);
        }
        Ok(s)
    }

    pub fn insert(&mut self, y: usize) {
        assert!(y < self.num_classes, "label {y} out of range");
        self.words[y / 64] |= 1 << (y % 64);
    }

    pub fn contains(&self, y: usize) -> bool {
        y < self.num_classes && self.words[y / 64] & (1 << (y % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&y| self.contains(y)).collect()
    }
}

/// THR set from precomputed per-label scores.
pub fn thr_set_from_scores(scores: &[f64], tau: f64) -> PredictionSet {
    let mut s = PredictionSet::empty(scores.len());
    for (y, &e) in scores.iter().enumerate() {
        if e >= tau {
            s.insert(y);
        }
    }
    s
}

/// `{y : E_θ(x, y) ≥ τ}`.
pub fn thr_set(logits: &[f64], tau: f64, kind: ScoreKind) -> PredictionSet {
    thr_set_from_scores(&all_scores(logits, kind), tau)
}

/// Soft memberships in `[0, 1]^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothSet {
    pub memberships: Vec<f64>,
}

impl SmoothSet {
    pub fn size(&self) -> f64 {
        self.memberships.iter().sum()
    }
}

/// `sigmoid((E_θ(x, y) − τ)/T)` for every label.
pub fn smooth_set(logits: &[f64], tau: f64, config: &ConformalConfig) -> SmoothSet {
    let t = config.temperature;
    SmoothSet {
        memberships: all_scores(logits, config.score_kind)
            .into_iter()
            .map(|e| sigmoid((e - tau) / t))
            .collect(),
    }
}

/// Coverage and size of a collection of prediction sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub coverage: f64,
    pub avg_size: f64,
    /// Per-class coverage; `NaN` for classes with no examples.
    pub class_coverage: Vec<f64>,
    /// Per-class mean set size; `NaN` for classes with no examples.
    pub class_size: Vec<f64>,
    pub class_count: Vec<usize>,
}

pub fn set_metrics(sets: &[PredictionSet], labels: &[usize]) -> Result<SetMetrics> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("prediction sets"));
    }
    if sets.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} sets but {} labels",
            sets.len(),
            labels.len()
        )));
    }
    let k = sets[0].num_classes();
    let mut covered = vec![0usize; k];
    let mut size = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (s, &y) in sets.iter().zip(labels) {
        check_label(y, k)?;
        count[y] += 1;
        size[y] += s.len();
        covered[y] += usize::from(s.contains(y));
    }
    let n = sets.len() as f64;
    let ratio = |a: usize, c: usize| if c == 0 { f64::NAN } else { a as f64 / c as f64 };
    Ok(SetMetrics {
        coverage: covered.iter().sum::<usize>() as f64 / n,
        avg_size: size.iter().sum::<usize>() as f64 / n,
        class_coverage: covered.iter().zip(&count).map(|(&a, &c)| ratio(a, c)).collect(),
        class_size: size.iter().zip(&count).map(|(&a, &c)| ratio(a, c)).collect(),
        class_count: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        assert_eq!(score(&[0.0, 0.0], 0, ScoreKind::Probability).unwrap(), 0.5);
        assert_eq!(score(&[3.0, -1.0], 0, ScoreKind::Logit).unwrap(), 3.0);
        let lp = score(&[0.0, 0.0, 0.0], 2, ScoreKind::LogProbability).unwrap();
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((lp + 1.0986).abs() < 1e-4);
        assert!(matches!(
            score(&[0.0, 1.0], 2, ScoreKind::Logit),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn log_probability_is_stable_for_huge_logits() {
        let lp = score(&[1000.0, 0.0], 1, ScoreKind::LogProbability).unwrap();
        assert_eq!(lp, -1000.0);
    }

    #[test]
    fn quantile_examples() {
        let q = empirical_quantile(&[0.1, 0.2, 0.3, 0.4, 0.5], 0.4).unwrap();
        assert_eq!(q, Quantile { tau: 0.2, rank_index: 1 });

        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_quantile(&s, 0.01).unwrap().tau, 1.0);

        let q = empirical_quantile(&[0.3, 0.9, 0.1, 0.5, 0.7], 0.999).unwrap();
        assert_eq!((q.tau, q.rank_index), (0.9, 1));
    }

    #[test]
    fn quantile_ties_use_lowest_index() {
        let q = empirical_quantile(&[0.5, 0.2, 0.2, 0.2, 0.9], 0.4).unwrap();
        // second order statistic among the tied 0.2s at indices 1, 2, 3
        assert_eq!(q, Quantile { tau: 0.2, rank_index: 2 });
        let q = empirical_quantile(&[0.2, 0.2], 0.1).unwrap();
        assert_eq!(q.rank_index, 0);
    }

    #[test]
    fn quantile_errors() {
        assert!(matches!(empirical_quantile(&[], 0.1), Err(Error::EmptyInput(_))));
        assert!(matches!(
            empirical_quantile(&[0.1, f64::NAN], 0.1),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn thr_set_examples() {
        let logits = [3.0, -1.0, 2.0];
        assert_eq!(thr_set(&logits, f64::MIN, ScoreKind::Logit).len(), 3);
        assert!(thr_set(&logits, 3.5, ScoreKind::Logit).is_empty());
        assert_eq!(thr_set(&logits, 2.0, ScoreKind::Logit).labels(), vec![0, 2]);
    }

    #[test]
    fn smooth_set_examples() {
        let cfg = |t| ConformalConfig {
            temperature: t,
            score_kind: ScoreKind::Logit,
            ..ConformalConfig::default()
        };
        assert_eq!(smooth_set(&[0.7], 0.7, &cfg(0.5)).memberships[0], 0.5);
        let m = smooth_set(&[1.5], 1.0, &cfg(0.5)).memberships[0];
        assert!((m - 0.731_058_578_630_004_9).abs() < 1e-12);
        let m = smooth_set(&[1.5], 1.0, &cfg(0.05)).memberships[0];
        assert!(m > 0.999);
    }

    #[test]
    fn metrics_examples() {
        let full = PredictionSet::from_labels(3, &[0, 1, 2]).unwrap();
        let m = set_metrics(&[full.clone(), full], &[0, 2]).unwrap();
        assert_eq!((m.coverage, m.avg_size), (1.0, 3.0));

        let e = PredictionSet::empty(3);
        let m = set_metrics(&[e.clone(), e], &[1, 1]).unwrap();
        assert_eq!((m.coverage, m.avg_size), (0.0, 0.0));

        let a = PredictionSet::from_labels(2, &[0]).unwrap();
        let b = PredictionSet::from_labels(2, &[0, 1]).unwrap();
        let m = set_metrics(&[a, b], &[0, 0]).unwrap();
        assert_eq!((m.coverage, m.avg_size), (1.0, 1.5));
        assert_eq!(m.class_count, vec![2, 0]);
        assert!(m.class_size[1].is_nan());

        assert!(set_metrics(&[], &[]).is_err());
    }

    #[test]
    fn wide_label_spaces_use_multiple_words() {
        let s = PredictionSet::from_labels(130, &[0, 64, 129]).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.contains(129) && !s.contains(128));
    }

    #[test]
    fn cotangent_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.8, 0.05];
        let w = [0.7, -0.2, 1.3, 0.4];
        for kind in [ScoreKind::Logit, ScoreKind::Probability, ScoreKind::LogProbability] {
            let f = |z: &[f64]| -> f64 {
                all_scores(z, kind).iter().zip(&w).map(|(e, w)| e * w).sum()
            };
            let c = score_cotangent(&logits, &w, kind);
            for j in 0..4 {
                let h = 1e-6;
                let mut zp = logits;
                let mut zm = logits;
                zp[j] += h;
                zm[j] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!((fd - c[j]).abs() < 1e-8, "{kind} {j}: {fd} vs {}", c[j]);
            }
        }
    }

    proptest! {
        #[test]
        fn quantile_value_is_permutation_invariant(
            mut v in prop::collection::vec(-100.0f64..100.0, 1..60),
            alpha in 0.001f64..0.999,
            seed in any::<u64>(),
        ) {
            let q1 = empirical_quantile(&v, alpha).unwrap().tau;
            let mut rng = crate::rng::stream(seed, "perm", 0);
            let p = crate::rng::permutation(&mut rng, v.len());
            v = p.iter().map(|&i| v[i]).collect();
            let q2 = empirical_quantile(&v, alpha).unwrap();
            prop_assert_eq!(q1, q2.tau);
            prop_assert_eq!(v[q2.rank_index], q2.tau);
        }

        #[test]
        fn low_temperature_smooth_set_rounds_to_thr_set(
            logits in prop::collection::vec(-5.0f64..5.0, 2..8),
            tau_frac in 0.0f64..1.0,
        ) {
            let scores = all_scores(&logits, ScoreKind::LogProbability);
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let spread = hi - lo;
            prop_assume!(spread > 1e-3);
            let tau = lo + tau_frac * spread;
            // skip inputs where a score sits within rounding distance of τ
            prop_assume!(scores.iter().all(|s| (s - tau).abs() > 1e-4 * spread));
            let cfg = ConformalConfig { temperature: 1e-6 * spread, ..ConformalConfig::default() };
            let soft = smooth_set(&logits, tau, &cfg);
            let hard = thr_set(&logits, tau, ScoreKind::LogProbability);
            for (y, m) in soft.memberships.iter().enumerate() {
                prop_assert_eq!(*m > 0.5, hard.contains(y));
            }
        }
    }
}
