//! Decoder denoising pretraining for semantic segmentation, at desk scale.
//!
//! The crate is organized along the training pipeline: a small
//! reverse-mode [`autodiff`] engine and [`optim`]izer, the noise processes in
//! [`corruption`], the encoder-decoder [`model`], synthetic [`data`], the
//! three training stages in [`pipelines`], segmentation [`eval`]uation and
//! the experiment [`harness`].

pub mod autodiff;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod pipelines;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
