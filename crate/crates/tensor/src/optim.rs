use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// RMSprop: `v <- rho * v + (1 - rho) * g^2; p <- p - lr * g / (sqrt(v) + eps)`.
///
/// Accumulators are allocated on the first step and shape-checked after.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState<T: Real = f32> {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<T>>,
}

impl<T: Real> RmspropState<T> {
    pub const DEFAULT_DECAY: f64 = 0.9;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(learning_rate: f64) -> Self {
        Self::with_params(learning_rate, Self::DEFAULT_DECAY, Self::DEFAULT_EPSILON)
    }

    pub fn with_params(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            decay,
            epsilon,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.accumulators
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
        }
        if self.accumulators.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.accumulators.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.accumulators) {
            if p.shape() != g.shape() || v.len() != p.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "rmsprop_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let rho = T::from_f64(self.decay);
        let one_minus = T::from_f64(1.0 - self.decay);
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.epsilon);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.accumulators.iter_mut()) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = rho * *v + one_minus * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}
