pub mod alignment;
pub mod dsp;
pub mod embedding;
pub mod error;
pub mod model;
pub mod objectives;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
