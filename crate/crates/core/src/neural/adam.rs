use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::Trainable;
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moment accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<M: Trainable + ?Sized>(model: &M, lr: f64) -> Self {
        let zeros: Vec<Tensor> = model.params().into_iter().map(Tensor::zeros_like).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update of `params` from `grads`; shapes must mirror the accumulators.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension { what: "adam parameter count", expected: self.first.len(), got: params.len() });
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Dimension { what: "adam parameter shape", expected: m.len(), got: p.len() });
            }
        }
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.lr);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to `model` using gradients held in a same-shaped `grads`.
pub fn adam_step<M: Trainable + ?Sized>(state: &mut AdamState, model: &mut M, grads: &M) -> Result<()> {
    state.update(model.params_mut(), grads.params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Dense};

    fn one_param(value: f64) -> Dense {
        let mut d = Dense::zeros(1, 1, Activation::Identity);
        d.weights.data_mut()[0] = value;
        d
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut model = one_param(0.7);
        let mut state = AdamState::new(&model, 0.001);
        let mut g = one_param(1.0);
        adam_step(&mut state, &mut model, &g).unwrap();
        let m_before = state.first_moments()[0].data()[0];
        let p_before = model.weights.data()[0];
        g.weights.data_mut()[0] = 0.0;
        adam_step(&mut state, &mut model, &g).unwrap();
        assert!(state.first_moments()[0].data()[0].abs() < m_before.abs());
        // bias stayed at zero gradient throughout
        assert_eq!(model.bias.data()[0], 0.0);
        assert!(model.weights.data()[0] < p_before);
        let mut fresh = one_param(0.3);
        let mut st = AdamState::new(&fresh, 0.01);
        adam_step(&mut st, &mut fresh, &one_param(0.0)).unwrap();
        assert_eq!(fresh.weights.data()[0], 0.3);
    }

    #[test]
    fn first_step_closed_form() {
        let mut model = one_param(0.0);
        let mut state = AdamState::new(&model, 0.001);
        adam_step(&mut state, &mut model, &one_param(1.0)).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((model.weights.data()[0] - expected).abs() < 1e-15);
        let after_one = model.weights.data()[0];
        adam_step(&mut state, &mut model, &one_param(1.0)).unwrap();
        assert!(model.weights.data()[0] < after_one);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = one_param(0.0);
        let mut state = AdamState::new(&model, 0.001);
        let other = Dense::zeros(2, 1, Activation::Identity);
        assert!(state.update(model.params_mut(), other.params()).is_err());
    }
}
