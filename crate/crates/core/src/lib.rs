//! levitunet-core: a hybrid convolution/transformer encoder-decoder for 2D
//! image segmentation, built on a self-contained reverse-mode autodiff
//! tensor core.
//!
//! The crate provides:
//! - [`tensor`] / [`ops`]: dense f32 tensors, the op set the architecture
//!   needs, and reverse-mode differentiation;
//! - [`nn`] / [`optim`] / [`gradcheck`]: layers, Adam, and a
//!   finite-difference gradient checker;
//! - [`encoder`] / [`model`]: the hybrid encoder, cascaded upsampling
//!   decoder and full model assembly for the 128s/192/384 variants;
//! - [`losses`] / [`metrics`]: the CE+Dice objective, Dice/Hausdorff
//!   metrics and slice-to-volume evaluation;
//! - [`data`]: raw tensor files, manifests, augmentation, batching and a
//!   synthetic shapes dataset;
//! - [`profile`]: parameter counts, analytic MAC estimates and throughput
//!   measurement;
//! - [`checkpoint`] / [`train`]: binary checkpoints and the training loop.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod profile;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{backward, with_grads, GradStore, Tensor};
