//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The crate provides everything needed to train small convolutional
//! variational autoencoders and CNN classifiers on the CPU:
//!
//! - [`Tensor`] values and the recording [`Tape`] with its reverse pass,
//! - the layer set in [`layers`] (convolution, max-pool, nearest upsample,
//!   dense, activations, dropout, flatten) and a [`Sequential`] stack,
//! - autoencoder and classification objectives in [`loss`],
//! - the [`RmspropState`] optimizer,
//! - a finite-difference checker in [`gradcheck`].
//!
//! Training runs in `f32`; every op is generic over [`Real`] so gradients can
//! be verified in `f64`.

mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod loss;
mod optim;
mod params;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use layers::{Activation, LayerSpec, Mode, Padding, Sequential};
pub use loss::LossTerms;
pub use optim::RmspropState;
pub use params::ParamSet;
pub use rng::Rng;
pub use scalar::{MatMut, MatRef, Real};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::{Init, Tensor};
