pub mod bench;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod model;
pub mod num;
pub mod rng;
pub mod stream;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use num::Scalar;
pub use tensor::{Graph, Tensor, Var};
