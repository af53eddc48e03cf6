//! Multi-generation self-distillation of deep ensembles for multitask
//! classification and regression, with entropy-based uncertainty
//! decomposition and calibration baselines.

pub mod autodiff;
pub mod balancer;
pub mod calibration;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::Tensor;
