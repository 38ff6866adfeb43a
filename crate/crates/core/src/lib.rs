//! ROI-conditioned latent diffusion at desk scale.
//!
//! The crate is organized around the pipeline stages: a small autodiff
//! tensor engine, synthetic ROI/stimulus data, the cortical-pyramid
//! adapter, depth-matched guidance injection, a toy diffusion backbone
//! with a two-stage trainer and DDIM sampler, and the evaluation metrics.

pub mod adapter;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod io;
pub mod params;
pub mod probe;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;

pub use autodiff::{Graph, Val};
pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
