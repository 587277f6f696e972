//! AdamW with decoupled weight decay.
//!
//! ```text
//! m  = β₁·m + (1-β₁)·g
//! v  = β₂·v + (1-β₂)·g²
//! m̂  = m / (1-β₁ᵗ),   v̂ = v / (1-β₂ᵗ)
//! θ' = θ - lr·m̂/(√v̂ + ε) - lr·λ·θ
//! ```

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates for a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Float> AdamWState<F> {
    pub fn new(len: usize) -> Self {
        AdamWState { m: vec![F::zero(); len], v: vec![F::zero(); len], step: 0 }
    }

    /// Apply one update in place. Increments the step counter first, so the
    /// first call uses `t = 1` bias correction.
    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: F, hyper: &AdamWConfig) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let cast = |x: f64| F::from(x).unwrap();
        let (b1, b2, eps, wd) =
            (cast(hyper.beta1), cast(hyper.beta2), cast(hyper.epsilon), cast(hyper.weight_decay));
        let one = F::one();
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let p = params[i];
            params[i] = p - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * p;
        }
    }
}

/// Functional form of a single step on one scalar.
pub fn adamw_step<F: Float>(
    param: F,
    grad: F,
    state: &AdamWState<F>,
    lr: F,
    hyper: &AdamWConfig,
) -> (F, AdamWState<F>) {
    let mut next = state.clone();
    let mut p = [param];
    next.step(&mut p, &[grad], lr, hyper);
    (p[0], next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_value() {
        let state = AdamWState::<f64>::new(1);
        let (p, next) = adamw_step(1.0, 1.0, &state, 0.1, &AdamWConfig::default());
        assert!((p - 0.899_000_001).abs() < 1e-6, "{p}");
        assert_eq!(next.step, 1);
        let (p32, _) = adamw_step(1.0f32, 1.0, &AdamWState::new(1), 0.1, &AdamWConfig::default());
        assert!((p32 as f64 - 0.899_000_001).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let hyper = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut state = AdamWState::<f64>::new(3);
        let mut params = [0.3, -2.0, 17.5];
        for _ in 0..5 {
            state.step(&mut params, &[0.0; 3], 0.5, &hyper);
        }
        assert_eq!(params, [0.3, -2.0, 17.5]);
    }
}
