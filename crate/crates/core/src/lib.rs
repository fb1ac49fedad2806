pub mod baselines;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod image_io;
pub mod interpret;
pub mod metrics;
pub mod model_io;
pub mod net;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
