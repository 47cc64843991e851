use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::tensor::{add_column_sums, add_row_bias, gemm, Tensor};
use super::Trainable;
use crate::error::{Error, Result};

/// Fully connected layer `y = act(x W + b)` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            weights: Tensor::glorot(&[input, output], input, output, rng),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self { weights: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]), activation }
    }

    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.shape()[1]] {
            return Err(Error::Dimension { what: "dense bias", expected: weights.shape()[1], got: bias.len() });
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn input_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Single-vector forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::Dimension { what: "dense input", expected: self.input_size(), got: x.len() });
        }
        Ok(self.forward_batch(x, 1))
    }

    /// Forward over a `batch x in` block; returns `batch x out` activations.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (i, o) = (self.input_size(), self.output_size());
        debug_assert_eq!(x.len(), batch * i);
        let mut y = vec![0.0; batch * o];
        gemm(batch, i, o, 1.0, x, false, self.weights.data(), false, 0.0, &mut y);
        add_row_bias(&mut y, self.bias.data());
        self.activation.apply(&mut y, o);
        y
    }

    /// Backward from the gradient w.r.t. the pre-activation `dz`. Accumulates
    /// parameter gradients into `grads` and returns `dx` when requested.
    pub fn backward_from_preact(&self, x: &[f64], dz: &[f64], batch: usize, grads: &mut Dense, want_dx: bool) -> Option<Vec<f64>> {
        let (i, o) = (self.input_size(), self.output_size());
        gemm(i, batch, o, 1.0, x, true, dz, false, 1.0, grads.weights.data_mut());
        add_column_sums(dz, grads.bias.data_mut());
        want_dx.then(|| {
            let mut dx = vec![0.0; batch * i];
            gemm(batch, o, i, 1.0, dz, false, self.weights.data(), true, 0.0, &mut dx);
            dx
        })
    }

    /// Backward from the gradient w.r.t. the outputs `y`.
    pub fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], batch: usize, grads: &mut Dense, want_dx: bool) -> Option<Vec<f64>> {
        let mut dz = dy.to_vec();
        self.activation.backward(y, &mut dz, self.output_size());
        self.backward_from_preact(x, &dz, batch, grads, want_dx)
    }
}

impl Trainable for Dense {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_cases() {
        let zero = Dense::zeros(3, 2, Activation::Identity);
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let one = Dense::from_parts(
            Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(),
            Tensor::from_vec(&[1], vec![1.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(one.forward(&[3.0]).unwrap(), vec![7.0]);

        let sig = Dense::zeros(2, 1, Activation::Sigmoid);
        assert_eq!(sig.forward(&[4.0, -1.0]).unwrap(), vec![0.5]);
        assert!(matches!(sig.forward(&[1.0]), Err(Error::Dimension { .. })));
    }
}
