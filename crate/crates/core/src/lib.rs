//! Feature propagation between video frames with progressive sparse local
//! attention, recursive feature updating and dense feature transforming,
//! on a small differentiable tensor substrate.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod nets;
pub mod neighborhood;
pub mod ops;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
