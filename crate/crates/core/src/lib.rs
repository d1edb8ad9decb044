pub mod autograd;
pub mod checkpoint;
pub mod dataset_io;
pub mod distortions;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod metrics;
pub mod networks;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{LdhError, Result};
