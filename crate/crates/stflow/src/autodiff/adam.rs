use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Adam optimizer state: per-parameter moment accumulators and the shared
/// step counter. Defaults follow the common lr 1e-3, beta 0.9/0.999,
/// eps 1e-8 settings.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, param_sizes: &[usize]) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Param(format!(
                "adam: learning rate must be positive, got {lr}"
            )));
        }
        Ok(AdamState {
            lr: F::from_f64(lr),
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            eps: F::from_f64(eps),
            step: 0,
            m: param_sizes.iter().map(|&s| vec![F::zero(); s]).collect(),
            v: param_sizes.iter().map(|&s| vec![F::zero(); s]).collect(),
        })
    }

    pub fn with_defaults(lr: f64, param_sizes: &[usize]) -> Result<Self> {
        AdamState::new(lr, 0.9, 0.999, 1e-8, param_sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place. Parameters must carry their
/// gradients (a `None` gradient counts as zero).
pub fn adam_step<F: Scalar>(params: &mut [&mut Tensor<F>], state: &mut AdamState<F>) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Param(format!(
            "adam: state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = F::one() - state.beta1.powi(t);
    let bc2 = F::one() - state.beta2.powi(t);
    let one = F::one();

    for (idx, param) in params.iter_mut().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        if m.len() != param.numel() {
            return Err(Error::Param(format!(
                "adam: parameter {idx} has {} elements, state expects {}",
                param.numel(),
                m.len()
            )));
        }
        let Some(grad) = param.grad().map(<[F]>::to_vec) else {
            continue;
        };
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (one - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (one - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
