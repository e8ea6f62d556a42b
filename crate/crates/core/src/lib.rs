pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
