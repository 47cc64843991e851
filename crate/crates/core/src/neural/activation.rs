use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    /// Row-wise softmax over the output units.
    Softmax,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    /// Applies the activation in place to a `rows x width` block.
    pub fn apply(self, z: &mut [f64], width: usize) {
        match self {
            Self::Identity => {}
            Self::Tanh => z.iter_mut().for_each(|x| *x = x.tanh()),
            Self::Sigmoid => z.iter_mut().for_each(|x| *x = sigmoid(*x)),
            Self::Relu => z.iter_mut().for_each(|x| *x = x.max(0.0)),
            Self::Softmax => {
                for row in z.chunks_exact_mut(width) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
            }
        }
    }

    /// Turns `dy` (gradient w.r.t. outputs `y`) into the gradient w.r.t. the
    /// pre-activations, in place.
    pub fn backward(self, y: &[f64], dy: &mut [f64], width: usize) {
        match self {
            Self::Identity => {}
            Self::Tanh => dy.iter_mut().zip(y).for_each(|(d, y)| *d *= 1.0 - y * y),
            Self::Sigmoid => dy.iter_mut().zip(y).for_each(|(d, y)| *d *= y * (1.0 - y)),
            Self::Relu => dy.iter_mut().zip(y).for_each(|(d, y)| {
                if *y <= 0.0 {
                    *d = 0.0
                }
            }),
            Self::Softmax => {
                for (d, y) in dy.chunks_exact_mut(width).zip(y.chunks_exact(width)) {
                    let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                    d.iter_mut().zip(y).for_each(|(d, y)| *d = y * (*d - dot));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        let mut z = vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        Activation::Softmax.apply(&mut z, 3);
        assert!((z[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((z[3] - 1.0 / 3.0).abs() < 1e-15);
        let mut r = vec![-1.0, 2.0];
        Activation::Relu.apply(&mut r, 2);
        assert_eq!(r, vec![0.0, 2.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let z0 = [0.3, -1.2, 0.7];
        let w = [0.5, -2.0, 1.5];
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softmax, Activation::Identity] {
            let f = |z: &[f64]| {
                let mut y = z.to_vec();
                act.apply(&mut y, 3);
                y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut y = z0.to_vec();
            act.apply(&mut y, 3);
            let mut d = w.to_vec();
            act.backward(&y, &mut d, 3);
            for i in 0..3 {
                let mut p = z0;
                let mut m = z0;
                p[i] += 1e-6;
                m[i] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - d[i]).abs() < 1e-8, "{act:?} {i}");
            }
        }
    }
}
