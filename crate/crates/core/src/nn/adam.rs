//! Adam with standard bias correction.

use super::{NnError, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_sizes: &[usize]) -> Self {
        Self {
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update across all parameter tensors.
///
/// If any gradient element is non-finite the step aborts before touching
/// parameters or optimizer state.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut [S]],
    grads: &[&[S]],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient(format!(
                "parameter {i} element {j}"
            )));
        }
    }

    state.t += 1;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.epsilon);
    let corr1 = S::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let corr2 = S::from_f64(1.0 - cfg.beta2.powi(state.t as i32));

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.len(), g.len());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
