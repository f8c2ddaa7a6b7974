//! Cross-silo federated learning over heterogeneous translation domains,
//! with FedAVG aggregation and dynamic (norm-ranked) tensor pulling.

pub mod data;
pub mod dynpull;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor used for training and exchange.
pub type Tensor32 = tensor::NamedTensor<f32>;
/// Double-precision tensor used by oracles and gradient checks.
pub type Tensor64 = tensor::NamedTensor<f64>;
pub type Model32 = nn::ModelState<f32>;
pub type Model64 = nn::ModelState<f64>;
