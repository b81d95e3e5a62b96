pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, Shape};
pub mod adapter;
pub mod factorization;
pub mod geometry;
pub mod grouping;
pub mod projection;
pub mod trainer;
