pub mod calibration;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod phantom;
pub mod pimethods;
mod serde_float;
pub mod tensor;

pub use error::{Error, Result};
