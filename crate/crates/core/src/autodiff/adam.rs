//! Adam optimizer with bias correction.

use super::{DiffTensor, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Debug)]
pub struct AdamState<T: Scalar> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[DiffTensor<T>], config: AdamConfig) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            step_count: 0,
            config,
        }
    }
}

/// One Adam update: reads each parameter's accumulated gradient (missing
/// gradients count as zero) and rewrites its values in place.
pub fn adam_step<T: Scalar>(params: &[DiffTensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} parameters but state tracks {}",
            params.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count;
    let cfg = state.config;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let corr2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.epsilon);

    for (pi, p) in params.iter().enumerate() {
        if p.numel() != state.first_moment[pi].len() {
            return Err(Error::Shape(format!(
                "adam_step: parameter {pi} has {} elements, moments have {}",
                p.numel(),
                state.first_moment[pi].len()
            )));
        }
        let grad = p.grad_or_zeros();
        let mut values = p.values();
        let m = &mut state.first_moment[pi];
        let v = &mut state.second_moment[pi];
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_m_b1 * g;
            v[i] = b2 * v[i] + one_m_b2 * g * g;
            let m_hat = m[i] * corr1;
            let v_hat = v[i] * corr2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_values(values)?;
    }
    Ok(())
}
