pub mod channels;
mod container;
mod error;

pub use error::{Error, Result};
pub mod objectives;
pub mod baselines;
pub mod endtoend;
pub mod training;
pub mod metrics;
