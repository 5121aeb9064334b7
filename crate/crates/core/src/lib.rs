//! Domain-adversarial training engine for patch classification.
//!
//! Trains a dual-head convolutional classifier (cell label head plus
//! gradient-reversed domain head) on two-domain data, with masked losses,
//! one-cycle scheduling, synthetic stain-shift data generation, and exact
//! t-SNE latent-space analysis.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
