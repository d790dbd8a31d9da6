//! Class balancing of small grayscale image datasets with per-class
//! convolutional variational autoencoders, plus a CNN detector, evaluation
//! metrics and the experiment pipeline tying them together.

pub mod batch;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod synthdata;

pub use error::{Error, Result};
pub use synthbalance_tensor as tensor;
