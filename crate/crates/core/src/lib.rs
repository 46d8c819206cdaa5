pub mod error;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub mod nn;
pub mod data;
pub mod split;
pub mod transport;
pub mod experiment;
