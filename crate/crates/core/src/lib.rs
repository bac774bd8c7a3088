pub mod attack;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod rng;
pub mod tensor;

pub use error::{MkorError, Result};
pub use tensor::Tensor;
