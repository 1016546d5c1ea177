//! Predictions, Poisson deviance scoring and the intercept-only baseline.

use serde::{Deserialize, Serialize};

use crate::data::EncodedInstance;
use crate::error::{Error, Result};
use crate::icl::ContextTargetBatch;
use crate::numeric::poisson_unit_deviance;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub log_rate: f64,
    pub rate: f64,
    pub mu: f64,
}

/// `μ = v·exp(log_rate)`.
pub fn predict(log_rate: f64, v: f64) -> Prediction {
    let rate = log_rate.exp();
    Prediction {
        log_rate,
        rate,
        mu: v * rate,
    }
}

/// Mean Poisson deviance `(2/n)·Σ[μ − y − y·ln(μ/y)]` (natural units).
pub fn poisson_deviance(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (y, mu) in pairs {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Domain(format!("prediction {mu} is not a positive finite mean")));
        }
        total += poisson_unit_deviance(y, mu);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("deviance of an empty sample".into()));
    }
    Ok(total / n as f64)
}

/// Deviance of `mu` against the responses of `rows`, in units of 10⁻².
pub fn deviance_pct(rows: &[EncodedInstance], mu: &[f64]) -> Result<f64> {
    if rows.len() != mu.len() {
        return Err(Error::dim("deviance", &[rows.len()], &[mu.len()]));
    }
    Ok(100.0 * poisson_deviance(rows.iter().zip(mu).map(|(r, &m)| (r.y, m)))?)
}

/// Phase-2 style loss `(1/|T|)·Σ_{i∈T} v_i·L(y_i, μ_i)`; `mu` holds one
/// entry per batch row, context entries are ignored through zero weights.
pub fn icl_loss(batch: &ContextTargetBatch, mu: &[f64]) -> Result<f64> {
    if mu.len() != batch.len() {
        return Err(Error::dim("icl_loss", &[batch.len()], &[mu.len()]));
    }
    if batch.n_target == 0 {
        return Err(Error::Contract("icl_loss without target rows".into()));
    }
    let w = batch.loss_weights();
    let mut total = 0.0;
    for i in 0..batch.len() {
        if w[i] != 0.0 {
            if !(mu[i] > 0.0) {
                return Err(Error::Domain(format!("prediction {} is not positive", mu[i])));
            }
            total += w[i] * poisson_unit_deviance(batch.y[i], mu[i]);
        }
    }
    Ok(total / batch.n_target as f64)
}

/// Intercept-only model `λ = Σy / Σv` fitted on training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub rate: f64,
}

impl NullModel {
    pub fn fit(rows: &[EncodedInstance]) -> Result<Self> {
        let y: f64 = rows.iter().map(|r| r.y).sum();
        let v: f64 = rows.iter().map(|r| r.v).sum();
        if !(v > 0.0) || !(y > 0.0) {
            return Err(Error::Domain("null model needs positive exposure and claims".into()));
        }
        Ok(Self { rate: y / v })
    }

    pub fn log_rate(&self) -> f64 {
        self.rate.ln()
    }

    pub fn mu(&self, rows: &[EncodedInstance]) -> Vec<f64> {
        rows.iter().map(|r| predict(self.log_rate(), r.v).mu).collect()
    }
}

/// Arithmetic mean of per-model predictions, row by row.
pub fn ensemble_mean(per_model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Contract("ensemble of zero models".into()))?;
    if per_model.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Contract("ensemble members disagree in length".into()));
    }
    let r = per_model.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let x0 = first[i];
            if per_model.iter().all(|p| p[i] == x0) {
                x0
            } else {
                per_model.iter().map(|p| p[i]).sum::<f64>() / r
            }
        })
        .collect())
}
