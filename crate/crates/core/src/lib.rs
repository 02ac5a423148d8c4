//! Activation-patching workbench for persona-conditioned multiple-choice
//! evaluation on a hookable decoder-only transformer.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod cache;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod figures;
pub mod fixtures;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod prompt;
pub mod rope;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;

pub use cache::ActivationCache;
pub use error::{Error, Result};
pub use model::{HookSite, Model, ModelConfig, SiteKind};
pub use scalar::Scalar;
pub use tensor::Tensor2D;

/// Single-precision tensor, the storage type of model files.
pub type Tensor = Tensor2D<f32>;
pub type Tensor64 = Tensor2D<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Cache32 = ActivationCache<f32>;
pub type Cache64 = ActivationCache<f64>;
