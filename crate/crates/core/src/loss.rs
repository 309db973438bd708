//! Smoothed size loss and its partial derivatives.
//!
//! For a prediction example with per-label scores `E_k` and a fixed threshold
//! `τ`, the smooth set size is `Σ_k σ((E_k − τ)/T)` and the loss is the hinge
//! `w · max(0, size − κ)`. Both partials are taken with `τ` held fixed; the
//! dependence of `τ` on `θ` enters later through the quantile-gradient
//! estimate (see [`crate::estimator::plugin_gradient`]).

use crate::conformal::{all_scores, score_cotangent, sigmoid, softmax, ConformalConfig, SmoothSet};
use crate::error::{Error, Result};
use crate::nn::{Example, Model};

/// Floor applied inside the log transform.
pub const LOG_FLOOR: f64 = 1e-8;

/// Batch means of the loss and of its two partials.
#[derive(Debug, Clone, PartialEq)]
pub struct LossComponents {
    pub ell_bar: f64,
    pub dl_dtheta_bar: Vec<f64>,
    pub dl_dtau_bar: f64,
}

/// `max(0, Σ memberships − κ)`.
pub fn size_loss(smooth: &SmoothSet, kappa: usize) -> f64 {
    (smooth.size() - kappa as f64).max(0.0)
}

/// Sample-mean loss and its partials in `θ` and `τ` at fixed `tau_hat`.
pub fn loss_and_partials(
    model: &Model,
    tau_hat: f64,
    batch_pred: &[&Example],
    config: &ConformalConfig,
) -> Result<LossComponents> {
    if batch_pred.is_empty() {
        return Err(Error::EmptyInput("prediction batch"));
    }
    let t = config.temperature;
    let w = config.size_weight;
    let kappa = config.target_size as f64;
    let inv_n = 1.0 / batch_pred.len() as f64;

    let mut ell_sum = 0.0;
    let mut dtau_sum = 0.0;
    let mut dtheta = vec![0.0; model.param_count()];
    let mut slopes = vec![0.0; model.num_classes()];
    for ex in batch_pred {
        let logits = model.forward(&ex.x)?;
        let scores = all_scores(&logits, config.score_kind);
        let mut size = 0.0;
        for (s, &e) in slopes.iter_mut().zip(&scores) {
            let m = sigmoid((e - tau_hat) / t);
            size += m;
            // σ'(u)/T
            *s = m * (1.0 - m) / t;
        }
        // hinge inactive (including the tie size = κ) contributes nothing
        if size <= kappa {
            continue;
        }
        ell_sum += w * (size - kappa);
        dtau_sum -= w * slopes.iter().sum::<f64>();
        let cot = score_cotangent(&logits, &slopes, config.score_kind);
        model.vjp_params_acc(&ex.x, &cot, w * inv_n, &mut dtheta)?;
    }
    Ok(LossComponents {
        ell_bar: ell_sum * inv_n,
        dl_dtheta_bar: dtheta,
        dl_dtau_bar: dtau_sum * inv_n,
    })
}

/// Mean loss only; the value whose partials [`loss_and_partials`] returns.
pub fn mean_loss(
    model: &Model,
    tau_hat: f64,
    batch: &[&Example],
    config: &ConformalConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("prediction batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let logits = model.forward(&ex.x)?;
        let smooth = crate::conformal::smooth_set(&logits, tau_hat, config);
        total += config.size_weight * size_loss(&smooth, config.target_size);
    }
    Ok(total / batch.len() as f64)
}

/// `(log ℓ̂, 1/ℓ̂)` with `ℓ̂` floored at [`LOG_FLOOR`].
pub fn h_transform(ell_bar: f64) -> Result<(f64, f64)> {
    if ell_bar.is_nan() || ell_bar < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "log transform needs a non-negative loss, got {ell_bar}"
        )));
    }
    let v = ell_bar.max(LOG_FLOOR);
    Ok((v.ln(), 1.0 / v))
}

/// `λ‖θ‖²`.
pub fn reg_value(params: &[f64], lambda: f64) -> f64 {
    lambda * params.iter().map(|p| p * p).sum::<f64>()
}

/// `∂(λ‖θ‖²)/∂θ = 2λθ`.
pub fn reg_grad(params: &[f64], lambda: f64) -> Vec<f64> {
    params.iter().map(|p| 2.0 * lambda * p).collect()
}

/// Mean cross-entropy over a batch and its parameter gradient.
pub fn cross_entropy_grad(model: &Model, batch: &[&Example]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("cross-entropy batch"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.param_count()];
    let mut total = 0.0;
    for ex in batch {
        let logits = model.forward(&ex.x)?;
        let lp = crate::conformal::score(&logits, ex.y, crate::conformal::ScoreKind::LogProbability)?;
        total -= lp;
        let mut cot = softmax(&logits);
        cot[ex.y] -= 1.0;
        model.vjp_params_acc(&ex.x, &cot, inv_n, &mut grad)?;
    }
    Ok((total * inv_n, grad))
}
