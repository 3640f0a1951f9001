pub mod cli;
pub mod error;
pub mod gradient_suite;
pub mod haze;
pub mod io;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Shape, Tensor, Var};
