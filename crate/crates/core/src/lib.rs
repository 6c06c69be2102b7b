pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
