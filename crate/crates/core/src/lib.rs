//! Noise-adaptive image denoising.
//!
//! Synthetic degradation, gradient-residual noise estimation, a noise-modulated
//! channel/spatial attention block, cross-modal token fusion, a σ-weighted
//! composite objective, and the training and evaluation kit around them.

pub mod backbone;
pub mod degrade;
pub mod error;
pub mod evalkit;
pub mod filter;
pub mod graph;
pub mod imagedata;
pub mod naab;
pub mod nle;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{MindError, Result};
pub use graph::{Graph, Var};
pub use imagedata::Image;
pub use tensor::{Real, Tensor};
