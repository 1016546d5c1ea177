use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, numel: usize) -> Self {
        Self {
            config,
            m: vec![0.0; numel],
            s: vec![0.0; numel],
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` in place.
pub fn adamw_step(param: &mut Tensor, grad: Option<&[f64]>, state: &mut AdamWState) -> Result<()> {
    let grad = grad.ok_or_else(|| Error::Contract("adamw_step without a gradient".into()))?;
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(Error::dim("adamw_step", param.shape(), &[grad.len()]));
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.s[i] = c.beta2 * state.s[i] + (1.0 - c.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let s_hat = state.s[i] / bc2;
        *p = *p - c.lr * c.weight_decay * *p - c.lr * m_hat / (s_hat.sqrt() + c.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = Tensor::vector(vec![0.3, -1.2]);
        let mut st = AdamWState::new(cfg(0.1, 0.0), 2);
        adamw_step(&mut p, Some(&[0.0, 0.0]), &mut st).unwrap();
        assert_eq!(p.data(), &[0.3, -1.2]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // m = 0.1, s = 0.05, bias-corrected both to 1; step = 0.1 / (1 + 1e-8).
        let mut p = Tensor::scalar(0.5);
        let mut st = AdamWState::new(cfg(0.1, 0.0), 1);
        adamw_step(&mut p, Some(&[1.0]), &mut st).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_in_isolation() {
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamWState::new(cfg(0.1, 0.01), 1);
        adamw_step(&mut p, Some(&[0.0]), &mut st).unwrap();
        assert_eq!(p.item(), 2.0 - 0.1 * 0.01 * 2.0);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamWState::new(cfg(0.1, 0.01), 1);
        assert!(matches!(adamw_step(&mut p, None, &mut st), Err(Error::Contract(_))));
    }
}
