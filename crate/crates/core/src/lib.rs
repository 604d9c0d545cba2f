pub mod autodiff;
pub mod bench;
pub mod compile;
pub mod distill;
pub mod error;
pub mod l0;
pub mod model;
pub mod optim;
pub mod report;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
