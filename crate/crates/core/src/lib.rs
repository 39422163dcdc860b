//! Label-conditioned latent diffusion toolkit for synthesizing pixel-aligned
//! semantic segmentation datasets.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common choices.

pub mod config;
pub mod datasetgen;
pub mod diffusion;
pub mod error;
pub mod fsutil;
pub mod label;
pub mod mrlf;
pub mod prompting;
pub mod rcg;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use label::{ClassId, ClassTaxonomy, SemanticMask};
pub use scalar::Scalar;

/// Single-precision latent canvas, the default for generation.
pub type Latent = tensor::LatentCanvas<f32>;
pub type Latent64 = tensor::LatentCanvas<f64>;
pub type Image = tensor::ImageTensor<f32>;
pub type Image64 = tensor::ImageTensor<f64>;
pub type Model = diffusion::ControlledModel<f32>;
pub type Model64 = diffusion::ControlledModel<f64>;
pub type Schedule = diffusion::NoiseSchedule<f32>;
pub type Schedule64 = diffusion::NoiseSchedule<f64>;
pub type Distribution = rcg::ClassDistribution<f64>;
