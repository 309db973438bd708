//! Conformal training loop.
//!
//! Each step splits a batch of `2n` examples into a calibration half, used to
//! estimate `τ` and `∂τ/∂θ`, and a prediction half, used for the loss and its
//! partials. The assembled plug-in gradient is applied with Nesterov SGD under
//! a multi-step learning-rate schedule. The naive estimator gives the plain
//! conformal-training baseline; the code path is otherwise identical.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::conformal::ConformalConfig;
use crate::error::{Error, Result};
use crate::estimator::{estimate, plugin_gradient, EstimatorKind, GradEstimate};
use crate::eval::holdout_metrics;
use crate::loss::{cross_entropy_grad, h_transform, loss_and_partials, reg_grad, reg_value, LossComponents};
use crate::nn::{Example, Model};
use crate::data::Dataset;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total batch size `2n`; split into equal calibration and prediction halves.
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub conformal: ConformalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            epochs: 50,
            base_lr: 0.05,
            momentum: 0.9,
            seed: 0,
            estimator: EstimatorKind::MRanking { m: 6 },
            conformal: ConformalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch_size must be even and ≥ 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.estimator
            .validate(self.batch_size / 2)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.conformal.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub avg_set_size: f64,
    pub coverage: f64,
    pub mean_selected: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: [&str; 8] = [
    "epoch",
    "train_loss",
    "test_loss",
    "test_acc",
    "avg_set_size",
    "coverage",
    "mean_selected",
    "grad_norm",
];

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HISTORY_HEADER)?;
        for r in &self.records {
            w.write_record(&[
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.test_loss.to_string(),
                r.test_acc.to_string(),
                r.avg_set_size.to_string(),
                r.coverage.to_string(),
                r.mean_selected.to_string(),
                r.grad_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything that went into one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// `h(ℓ̂) + R(θ)` (plus the base loss when enabled).
    pub loss: f64,
    pub components: LossComponents,
    pub estimate: GradEstimate,
    /// `∂R/∂θ` at the pre-update parameters.
    pub reg: Vec<f64>,
    /// Cross-entropy gradient term, present only when the base loss is on.
    pub base_grad: Option<Vec<f64>>,
    pub gradient: Vec<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    /// No prediction example had an active hinge.
    pub inactive: bool,
}

/// Uniformly random equal halves `(B_cal, B_pred)`.
pub fn split_batch<'a, R: Rng + ?Sized>(
    batch: &[&'a Example],
    rng: &mut R,
) -> Result<(Vec<&'a Example>, Vec<&'a Example>)> {
    if batch.is_empty() || !batch.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "batch size must be even and non-zero, got {}",
            batch.len()
        )));
    }
    let perm = rng::permutation(rng, batch.len());
    let half = batch.len() / 2;
    let cal = perm[..half].iter().map(|&i| batch[i]).collect();
    let pred = perm[half..].iter().map(|&i| batch[i]).collect();
    Ok((cal, pred))
}

/// Base rate decayed by 0.1 at `⌊2T/5⌋`, `⌊3T/5⌋` and `⌊4T/5⌋`.
pub fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let passed = [2, 3, 4]
        .iter()
        .filter(|&&k| epoch >= k * total_epochs / 5)
        .count();
    base_lr * 0.1f64.powi(passed as i32)
}

/// `v ← μv + g`, `θ ← θ − lr·(g + μv)`.
pub fn nesterov_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64) -> Result<()> {
    if velocity.len() != params.len() || grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "optimizer state",
            expected: params.len(),
            actual: if velocity.len() != params.len() { velocity.len() } else { grad.len() },
        });
    }
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g;
        *p -= lr * (g + mu * *v);
    }
    Ok(())
}

/// Computes the plug-in gradient on one batch and applies the update.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    velocity: &mut [f64],
    batch: &[&Example],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepLog> {
    if batch.len() != cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "expected a batch of {}, got {}",
            cfg.batch_size,
            batch.len()
        )));
    }
    let conf = &cfg.conformal;
    let (cal, pred) = split_batch(batch, rng)?;
    let est = estimate(model, &cal, conf.alpha, conf.score_kind, cfg.estimator)?;
    let components = loss_and_partials(model, est.tau_hat, &pred, conf)?;
    let reg = reg_grad(model.params(), conf.reg_weight);
    let mut gradient = plugin_gradient(&components, &est, &reg)?;
    let (h, _) = h_transform(components.ell_bar)?;
    let mut loss = h + reg_value(model.params(), conf.reg_weight);

    let base_grad = if conf.base_loss_weight > 0.0 {
        let (ce, g) = cross_entropy_grad(model, &pred)?;
        loss += conf.base_loss_weight * ce;
        let scaled: Vec<f64> = g.iter().map(|v| conf.base_loss_weight * v).collect();
        for (a, b) in gradient.iter_mut().zip(&scaled) {
            *a += b;
        }
        Some(scaled)
    } else {
        None
    };

    let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    nesterov_step(model.params_mut(), velocity, &gradient, lr, cfg.momentum)?;
    Ok(StepLog {
        loss,
        inactive: components.ell_bar == 0.0,
        components,
        estimate: est,
        reg,
        base_grad,
        gradient,
        grad_norm,
        lr,
    })
}

/// Full training run with end-of-epoch evaluation on a fixed calibration/test pair.
pub fn train(
    model: Model,
    train_set: &Dataset,
    cal_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    train_with_observer(model, train_set, cal_set, test_set, cfg, |_, _| {})
}

/// [`train`], calling `on_step(epoch, log)` after every update.
pub fn train_with_observer<F: FnMut(usize, &StepLog)>(
    mut model: Model,
    train_set: &Dataset,
    cal_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "training set of {} is smaller than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let mut rng: StreamRng = rng::stream(cfg.seed, "train", 0);
    let mut velocity = vec![0.0; model.param_count()];
    let mut history = TrainHistory::default();
    let steps_per_epoch = train_set.len() / cfg.batch_size;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg.base_lr);
        // without replacement; the trailing partial batch is dropped
        let order = rng::permutation(&mut rng, train_set.len());
        let (mut loss_sum, mut sel_sum, mut norm_sum) = (0.0, 0.0, 0.0);
        for step in 0..steps_per_epoch {
            let batch: Vec<&Example> = order[step * cfg.batch_size..(step + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &train_set.examples[i])
                .collect();
            let log = train_step(&mut model, &mut velocity, &batch, cfg, lr, &mut rng)?;
            loss_sum += log.loss;
            sel_sum += log.estimate.n_selected as f64;
            norm_sum += log.grad_norm;
            on_step(epoch, &log);
        }
        let n = steps_per_epoch as f64;
        let m = holdout_metrics(&model, cal_set, test_set, &cfg.conformal)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            test_loss: m.loss,
            test_acc: m.accuracy,
            avg_set_size: m.avg_size,
            coverage: m.coverage,
            mean_selected: sel_sum / n,
            grad_norm: norm_sum / n,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::ScoreKind;
    use crate::data::{gen_gmm, split_dataset, GmmSpec};

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 50, 0.05), 0.05);
        assert!((lr_at(19, 50, 0.05) - 0.05).abs() < 1e-18);
        assert!((lr_at(20, 50, 0.05) - 0.005).abs() < 1e-15);
        assert!((lr_at(30, 50, 0.05) - 0.0005).abs() < 1e-15);
        assert!((lr_at(45, 50, 0.05) - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn nesterov_examples() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        nesterov_step(&mut p, &mut v, &[0.5, -1.0], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![0.95, 2.1]);

        let mut p = vec![3.0];
        let mut v = vec![0.0];
        nesterov_step(&mut p, &mut v, &[0.0], 0.1, 0.9).unwrap();
        assert_eq!((p[0], v[0]), (3.0, 0.0));

        // v: 0 → 1 → 1.9; θ: 0 → −0.19 → −0.461
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        nesterov_step(&mut p, &mut v, &[1.0], 0.1, 0.9).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && (p[0] + 0.19).abs() < 1e-15);
        nesterov_step(&mut p, &mut v, &[1.0], 0.1, 0.9).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-15 && (p[0] + 0.461).abs() < 1e-15);

        assert!(nesterov_step(&mut p, &mut v, &[1.0, 2.0], 0.1, 0.9).is_err());
    }

    #[test]
    fn split_batch_examples() {
        let exs: Vec<Example> = (0..10).map(|i| Example::new(vec![i as f64], 0)).collect();
        let batch: Vec<&Example> = exs.iter().collect();
        let (c, p) = split_batch(&batch[..2], &mut rng::stream(0, "s", 0)).unwrap();
        assert_eq!((c.len(), p.len()), (1, 1));
        assert_ne!(c[0].x, p[0].x);

        let a = split_batch(&batch, &mut rng::stream(5, "s", 0)).unwrap();
        let b = split_batch(&batch, &mut rng::stream(5, "s", 0)).unwrap();
        assert_eq!(a, b);

        assert!(split_batch(&batch[..3], &mut rng::stream(0, "s", 0)).is_err());
    }

    #[test]
    fn split_batch_membership_is_uniform() {
        let exs: Vec<Example> = (0..10).map(|i| Example::new(vec![i as f64], 0)).collect();
        let batch: Vec<&Example> = exs.iter().collect();
        let mut rng = rng::stream(11, "freq", 0);
        let mut hits = [0usize; 10];
        let trials = 10_000;
        for _ in 0..trials {
            let (cal, _) = split_batch(&batch, &mut rng).unwrap();
            for e in cal {
                hits[e.x[0] as usize] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.5).abs() <= 0.02, "{f}");
        }
    }

    fn toy() -> (Dataset, Dataset, Dataset) {
        let spec = GmmSpec {
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            variances: vec![vec![1.0, 1.0]; 2],
            weights: vec![0.5, 0.5],
            num_samples: 1400,
            seed: 2,
        };
        split_dataset(gen_gmm(&spec).unwrap(), (1000, 200, 200), 1).unwrap()
    }

    fn toy_cfg(estimator: EstimatorKind) -> TrainConfig {
        TrainConfig {
            batch_size: 100,
            epochs: 2,
            base_lr: 1e-3,
            momentum: 0.9,
            seed: 3,
            estimator,
            conformal: ConformalConfig {
                alpha: 0.1,
                temperature: 0.5,
                target_size: 0,
                size_weight: 1.0,
                reg_weight: 0.0005,
                score_kind: ScoreKind::LogProbability,
                base_loss_weight: 0.0,
            },
        }
    }

    #[test]
    fn logged_gradient_reassembles() {
        let (tr, _, _) = toy();
        let cfg = toy_cfg(EstimatorKind::MRanking { m: 5 });
        let mut model = Model::init(Model::linear_topology(2, 2), 0).unwrap();
        let mut vel = vec![0.0; model.param_count()];
        let mut r = rng::stream(0, "t", 0);
        for chunk in tr.examples.chunks_exact(100).take(5) {
            let batch: Vec<&Example> = chunk.iter().collect();
            let before = model.params().to_vec();
            let log = train_step(&mut model, &mut vel, &batch, &cfg, 0.01, &mut r).unwrap();
            assert_eq!(log.gradient, plugin_gradient(&log.components, &log.estimate, &log.reg).unwrap());
            assert_eq!(log.reg, reg_grad(&before, cfg.conformal.reg_weight));
        }
    }

    #[test]
    fn naive_and_rank_one_coincide_when_selections_agree() {
        let (tr, _, _) = toy();
        let batch: Vec<&Example> = tr.examples[..100].iter().collect();
        let base = Model::init(Model::linear_topology(2, 2), 4).unwrap();
        let naive_cfg = toy_cfg(EstimatorKind::Naive);
        let rank_cfg = toy_cfg(EstimatorKind::MRanking { m: 1 });
        let (mut m1, mut m2) = (base.clone(), base.clone());
        let (mut v1, mut v2) = (vec![0.0; 6], vec![0.0; 6]);
        let l1 = train_step(&mut m1, &mut v1, &batch, &naive_cfg, 0.01, &mut rng::stream(0, "x", 0)).unwrap();
        let l2 = train_step(&mut m2, &mut v2, &batch, &rank_cfg, 0.01, &mut rng::stream(0, "x", 0)).unwrap();
        // with continuous scores the rank sample has distance 0 and is the unique closest
        assert_eq!(l2.estimate.effective_epsilon, 0.0);
        assert_eq!(l1.gradient, l2.gradient);
        assert_eq!(m1, m2);
    }

    #[test]
    fn descent_on_two_class_toy() {
        let (tr, _, _) = toy();
        let cfg = toy_cfg(EstimatorKind::MRanking { m: 5 });
        let mut model = Model::init(Model::linear_topology(2, 2), 7).unwrap();
        let mut vel = vec![0.0; model.param_count()];
        let mut r = rng::stream(1, "descent", 0);
        let mut losses = Vec::new();
        let mut order = (0..tr.len()).collect::<Vec<_>>();
        for step in 0..200 {
            if step % 10 == 0 {
                order = rng::permutation(&mut r, tr.len());
            }
            let k = step % 10;
            let batch: Vec<&Example> = order[k * 100..(k + 1) * 100].iter().map(|&i| &tr.examples[i]).collect();
            let log = train_step(&mut model, &mut vel, &batch, &cfg, 1e-3, &mut r).unwrap();
            losses.push(log.components.ell_bar);
        }
        let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(last <= 0.8 * first, "running loss {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic_and_validated() {
        let (tr, cal, te) = toy();
        let cfg = toy_cfg(EstimatorKind::MRanking { m: 5 });
        let m = Model::init(Model::linear_topology(2, 2), 1).unwrap();
        let (a, ha) = train(m.clone(), &tr, &cal, &te, &cfg).unwrap();
        let (b, hb) = train(m.clone(), &tr, &cal, &te, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.records.len(), 2);

        let bad = TrainConfig { epochs: 0, ..cfg.clone() };
        assert!(matches!(train(m.clone(), &tr, &cal, &te, &bad), Err(Error::Config(_))));
        let odd = TrainConfig { batch_size: 99, ..cfg };
        assert!(matches!(train(m, &tr, &cal, &te, &odd), Err(Error::Config(_))));
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 0,
                train_loss: -1.5,
                test_loss: -1.25,
                test_acc: 0.5,
                avg_set_size: 1.75,
                coverage: 0.875,
                mean_selected: 6.0,
                grad_norm: 0.125,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,test_loss,test_acc,avg_set_size,coverage,mean_selected,grad_norm\n\
             0,-1.5,-1.25,0.5,1.75,0.875,6,0.125\n"
        );
    }
}
