use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::dense::Dense;
use super::tensor::Tensor;
use super::Trainable;
use crate::error::{Error, Result};

/// Stack of dense layers with ReLU hidden units and a caller-chosen head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations from a batched forward pass; `acts[0]` is the input.
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
    pub batch: usize,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has input")
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, head: Activation, rng: &mut R) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(Dense::new(prev, h, Activation::Relu, rng));
            prev = h;
        }
        layers.push(Dense::new(prev, output, head, rng));
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.input_size(), l.output_size(), l.activation)).collect() }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("at least one layer").output_size()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Dense::output_size).collect()
    }

    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<MlpTrace> {
        if x.len() != batch * self.input_size() {
            return Err(Error::Dimension { what: "mlp input", expected: batch * self.input_size(), got: x.len() });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let y = l.forward_batch(acts.last().expect("nonempty"), batch);
            acts.push(y);
        }
        Ok(MlpTrace { acts, batch })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.acts.pop().expect("nonempty"))
    }

    /// Backward from the gradient w.r.t. the head's pre-activation.
    pub fn backward_from_logits(&self, trace: &MlpTrace, dz_out: Vec<f64>, grads: &mut Mlp) {
        let n = self.layers.len();
        let mut dz = dz_out;
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let dx = layer.backward_from_preact(&trace.acts[li], &dz, trace.batch, &mut grads.layers[li], li > 0);
            if let Some(mut dx) = dx {
                self.layers[li - 1].activation.backward(&trace.acts[li], &mut dx, layer.input_size());
                dz = dx;
            }
        }
    }
}

impl Trainable for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{grad_check, GradCheckConfig};
    use crate::neural::loss::{binary_cross_entropy, categorical_cross_entropy};
    use crate::rng::rng_from_seed;

    #[test]
    fn sigmoid_head_gradients() {
        let mut rng = rng_from_seed(3);
        let mut m = Mlp::new(4, &[5, 3], 1, Activation::Sigmoid, &mut rng).unwrap();
        // keep ReLU pre-activations off the kink at zero
        for l in &mut m.layers {
            l.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(0.05..0.3));
        }
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = [1.0, 0.0, 1.0];
        let loss = |m: &Mlp| binary_cross_entropy(m.forward_batch(&x, 3).unwrap().output(), &y);
        let tr = m.forward_batch(&x, 3).unwrap();
        let dz = tr.output().iter().zip(&y).map(|(p, y)| (p - y) / 3.0).collect();
        let mut g = m.zeros_like();
        m.backward_from_logits(&tr, dz, &mut g);
        let r = grad_check(&m, &g, loss, &GradCheckConfig::default());
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softmax_head_gradients() {
        let mut rng = rng_from_seed(4);
        let m = Mlp::new(3, &[6], 4, Activation::Softmax, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).cos()).collect();
        let cls = [2usize, 0];
        let loss = |m: &Mlp| categorical_cross_entropy(m.forward_batch(&x, 2).unwrap().output(), &cls, 4);
        let tr = m.forward_batch(&x, 2).unwrap();
        let mut dz = tr.output().to_vec();
        for (b, &c) in cls.iter().enumerate() {
            dz[b * 4 + c] -= 1.0;
        }
        dz.iter_mut().for_each(|d| *d /= 2.0);
        let mut g = m.zeros_like();
        m.backward_from_logits(&tr, dz, &mut g);
        let r = grad_check(&m, &g, loss, &GradCheckConfig::default());
        assert!(r.passed, "{r:?}");
    }
}
