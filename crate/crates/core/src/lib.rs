//! Degradation-aware selective state space engine.

pub mod autodiff;
pub mod bench;
pub mod degrade;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod modulation;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod restoration;
pub mod ssm;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;
