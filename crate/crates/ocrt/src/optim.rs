//! Adam with decoupled weight decay.

use crate::error::{OcrtError, Result};
use crate::nn::ParamList;
use crate::scalar::Scalar;

/// Per-parameter Adam moments plus the shared step counter.
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct AdamState<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![S::zero(); numel],
            v: vec![S::zero(); numel],
            step: 0,
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update. Decoupled weight decay is applied
/// to the parameter before the adaptive step.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut AdamState<S>,
    lr: S,
    weight_decay: S,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OcrtError::Contract(format!(
            "adam_step: parameter/gradient/state lengths disagree ({}, {}, {})",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if lr <= S::zero() {
        return Err(OcrtError::Contract("adam_step: lr must be positive".into()));
    }
    state.step += 1;
    let b1 = S::from_f64(BETA1);
    let b2 = S::from_f64(BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let t = state.step as i32;
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    for i in 0..params.len() {
        params[i] = params[i] - lr * weight_decay * params[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer bound to a named parameter list.
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub weight_decay: S,
    pub states: Vec<AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamList<S>, lr: S, weight_decay: S) -> Self {
        Adam {
            lr,
            weight_decay,
            states: params.iter().map(|(_, t)| AdamState::new(t.numel())).collect(),
        }
    }

    /// Apply one step from the gradients currently stored on the
    /// parameters, then clear them.
    pub fn step(&mut self, params: &ParamList<S>) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(OcrtError::Contract(
                "optimizer bound to a different parameter list".into(),
            ));
        }
        for ((_, t), st) in params.iter().zip(self.states.iter_mut()) {
            let mut data = t.to_vec();
            let grads = t.grad_vec();
            adam_step(&mut data, &grads, st, self.lr, self.weight_decay)?;
            t.set_data(data)?;
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = vec![1.5f64, -2.0];
        let g = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &g, &mut st, 1e-4, 0.0).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        // m1 = 0.1*g, v1 = 0.001*g^2, m̂ = g, v̂ = g^2
        // delta = -lr * g / (|g| + eps) ~= -lr * sign(g)
        let mut p = vec![1.0f64];
        let g = vec![0.5];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &g, &mut st, 1e-4, 0.0).unwrap();
        let expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert!((p[0] - 0.9999).abs() < 1e-8);
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let run = || {
            let mut p = vec![0.3f64, -0.7, 2.0];
            let g = vec![0.1, 0.2, -0.3];
            let mut st = AdamState::new(3);
            adam_step(&mut p, &g, &mut st, 1e-3, 1e-4).unwrap();
            adam_step(&mut p, &g, &mut st, 1e-3, 1e-4).unwrap();
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![1.0f64];
        let g = vec![0.5, 0.5];
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut p, &g, &mut st, 1e-4, 0.0).is_err());
    }
}
