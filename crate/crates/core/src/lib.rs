pub mod bench;
pub mod engine;
pub mod error;
pub mod kmeans;
pub mod map;
pub mod recorder;
pub mod rng;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
