//! LSTM cell with tanh activation and sigmoid recurrent activation, unrolled
//! over short sequences with full backpropagation through time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::sigmoid;
use super::tensor::{add_column_sums, add_row_bias, gemm, Tensor};
use super::Trainable;
use crate::error::{Error, Result};

/// Gate columns are laid out `[input | forget | candidate | output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_size: usize,
    pub units: usize,
    /// `input_size x 4 units`
    pub w_input: Tensor,
    /// `units x 4 units`
    pub w_recurrent: Tensor,
    /// `4 units`
    pub bias: Tensor,
}

/// Activations kept from a forward unroll, batch-major per step.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    /// `h_0 .. h_T`, with `h_0 = 0`.
    hidden: Vec<Vec<f64>>,
    /// `c_0 .. c_T`, with `c_0 = 0`.
    cell: Vec<Vec<f64>>,
    /// Activated gates per step, `batch x 4 units`.
    gates: Vec<Vec<f64>>,
    tanh_cell: Vec<Vec<f64>>,
}

impl LstmTrace {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// `h_t` for `t` in `1..=T`.
    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.hidden[t]
    }

    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.last().expect("trace has h_0")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl LstmCell {
    /// Glorot-uniform kernels, zero biases except a unit forget-gate bias.
    pub fn new<R: Rng + ?Sized>(input_size: usize, units: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(&[4 * units]);
        bias.data_mut()[units..2 * units].iter_mut().for_each(|b| *b = 1.0);
        Self {
            input_size,
            units,
            w_input: Tensor::glorot(&[input_size, 4 * units], input_size, 4 * units, rng),
            w_recurrent: Tensor::glorot(&[units, 4 * units], units, 4 * units, rng),
            bias,
        }
    }

    pub fn zeros(input_size: usize, units: usize) -> Self {
        Self {
            input_size,
            units,
            w_input: Tensor::zeros(&[input_size, 4 * units]),
            w_recurrent: Tensor::zeros(&[units, 4 * units]),
            bias: Tensor::zeros(&[4 * units]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.units * (self.input_size + self.units + 1)
    }

    /// One step for a single example: returns `(h_t, c_t)`.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_size {
            return Err(Error::Dimension { what: "lstm input", expected: self.input_size, got: x.len() });
        }
        if h_prev.len() != self.units || c_prev.len() != self.units {
            return Err(Error::Dimension { what: "lstm state", expected: self.units, got: h_prev.len().min(c_prev.len()) });
        }
        let mut gates = vec![0.0; 4 * self.units];
        let mut h = vec![0.0; self.units];
        let mut c = vec![0.0; self.units];
        let mut tc = vec![0.0; self.units];
        self.step_batch(x, h_prev, c_prev, 1, &mut gates, &mut h, &mut c, &mut tc);
        Ok((h, c))
    }

    #[allow(clippy::too_many_arguments)]
    fn step_batch(
        &self,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        batch: usize,
        gates: &mut [f64],
        h: &mut [f64],
        c: &mut [f64],
        tanh_c: &mut [f64],
    ) {
        let u = self.units;
        let g4 = 4 * u;
        gemm(batch, self.input_size, g4, 1.0, x, false, self.w_input.data(), false, 0.0, gates);
        gemm(batch, u, g4, 1.0, h_prev, false, self.w_recurrent.data(), false, 1.0, gates);
        add_row_bias(gates, self.bias.data());
        for b in 0..batch {
            let z = &mut gates[b * g4..(b + 1) * g4];
            let (zi, rest) = z.split_at_mut(u);
            let (zf, rest) = rest.split_at_mut(u);
            let (zg, zo) = rest.split_at_mut(u);
            let cp = &c_prev[b * u..(b + 1) * u];
            let cb = &mut c[b * u..(b + 1) * u];
            let hb = &mut h[b * u..(b + 1) * u];
            let tb = &mut tanh_c[b * u..(b + 1) * u];
            for j in 0..u {
                let i = sigmoid(zi[j]);
                let f = sigmoid(zf[j]);
                let g = zg[j].tanh();
                let o = sigmoid(zo[j]);
                zi[j] = i;
                zf[j] = f;
                zg[j] = g;
                zo[j] = o;
                cb[j] = f * cp[j] + i * g;
                tb[j] = cb[j].tanh();
                hb[j] = o * tb[j];
            }
        }
    }

    /// Unrolls over `inputs` (each `batch x input_size`) from zero state.
    pub fn forward_sequence(&self, inputs: Vec<Vec<f64>>, batch: usize) -> LstmTrace {
        let u = self.units;
        let steps = inputs.len();
        let mut trace = LstmTrace {
            batch,
            hidden: Vec::with_capacity(steps + 1),
            cell: Vec::with_capacity(steps + 1),
            gates: Vec::with_capacity(steps),
            tanh_cell: Vec::with_capacity(steps),
            inputs,
        };
        trace.hidden.push(vec![0.0; batch * u]);
        trace.cell.push(vec![0.0; batch * u]);
        for t in 0..steps {
            debug_assert_eq!(trace.inputs[t].len(), batch * self.input_size);
            let mut gates = vec![0.0; batch * 4 * u];
            let mut h = vec![0.0; batch * u];
            let mut c = vec![0.0; batch * u];
            let mut tc = vec![0.0; batch * u];
            self.step_batch(&trace.inputs[t], &trace.hidden[t], &trace.cell[t], batch, &mut gates, &mut h, &mut c, &mut tc);
            trace.gates.push(gates);
            trace.hidden.push(h);
            trace.cell.push(c);
            trace.tanh_cell.push(tc);
        }
        trace
    }

    /// Backpropagation through time. `dh[t]` is the external gradient on
    /// `h_{t+1}` (empty slices mean zero). Accumulates into `grads` and
    /// returns per-step input gradients when `want_dx` is set.
    pub fn backward_sequence(&self, trace: &LstmTrace, dh: &[Vec<f64>], grads: &mut LstmCell, want_dx: bool) -> Vec<Vec<f64>> {
        let u = self.units;
        let g4 = 4 * u;
        let batch = trace.batch;
        let steps = trace.steps();
        let mut dh_next = vec![0.0; batch * u];
        let mut dc_next = vec![0.0; batch * u];
        let mut dz = vec![0.0; batch * g4];
        let mut dxs = vec![Vec::new(); if want_dx { steps } else { 0 }];
        for t in (0..steps).rev() {
            let gates = &trace.gates[t];
            let tc = &trace.tanh_cell[t];
            let c_prev = &trace.cell[t];
            if let Some(ext) = dh.get(t).filter(|v| !v.is_empty()) {
                dh_next.iter_mut().zip(ext).for_each(|(a, b)| *a += b);
            }
            for b in 0..batch {
                let gb = &gates[b * g4..(b + 1) * g4];
                let dzb = &mut dz[b * g4..(b + 1) * g4];
                for j in 0..u {
                    let k = b * u + j;
                    let (i, f, g, o) = (gb[j], gb[u + j], gb[2 * u + j], gb[3 * u + j]);
                    let dht = dh_next[k];
                    let dc = dc_next[k] + dht * o * (1.0 - tc[k] * tc[k]);
                    dzb[j] = dc * g * i * (1.0 - i);
                    dzb[u + j] = dc * c_prev[k] * f * (1.0 - f);
                    dzb[2 * u + j] = dc * i * (1.0 - g * g);
                    dzb[3 * u + j] = dht * tc[k] * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
            }
            gemm(self.input_size, batch, g4, 1.0, &trace.inputs[t], true, &dz, false, 1.0, grads.w_input.data_mut());
            gemm(u, batch, g4, 1.0, &trace.hidden[t], true, &dz, false, 1.0, grads.w_recurrent.data_mut());
            add_column_sums(&dz, grads.bias.data_mut());
            if want_dx {
                let mut dx = vec![0.0; batch * self.input_size];
                gemm(batch, g4, self.input_size, 1.0, &dz, false, self.w_input.data(), true, 0.0, &mut dx);
                dxs[t] = dx;
            }
            gemm(batch, g4, u, 1.0, &dz, false, self.w_recurrent.data(), true, 0.0, &mut dh_next);
        }
        dxs
    }
}

impl Trainable for LstmCell {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_input, &self.w_recurrent, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_input, &mut self.w_recurrent, &mut self.bias]
    }
}
