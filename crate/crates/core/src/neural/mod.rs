//! Minimal neural-network toolkit: dense and LSTM layers with analytic
//! gradients, Adam, losses, checkpoints and finite-difference checking.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod mlp;
pub mod tensor;

pub use activation::Activation;
pub use adam::{adam_step, AdamState};
pub use dense::Dense;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use lstm::{LstmCell, LstmTrace};
pub use mlp::{Mlp, MlpTrace};
pub use tensor::Tensor;

/// Anything exposing an ordered list of parameter tensors. Gradients are held
/// in a second instance of the same type.
pub trait Trainable {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_total(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn zero_params(&mut self) {
        self.params_mut().into_iter().for_each(|t| t.fill(0.0));
    }

    /// Adds `other` (same layout) into `self`.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }
}
