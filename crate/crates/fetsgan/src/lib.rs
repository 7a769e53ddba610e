//! Seq2seq adversarial autoencoder for real-valued time-series generation,
//! with first-above-threshold reconstruction, least-squares adversarial
//! objectives in both feature space and latent space, and an evaluation
//! harness (discriminative score, train-on-synthetic/test-on-real predictive
//! score, spectral diagnostics, selective sampling).
//!
//! Everything runs on the crate's own reverse-mode tape ([`tensor::Tape`]);
//! training uses `f32`, while tests can instantiate the same graphs at `f64`
//! for finite-difference gradient checks.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorId};
