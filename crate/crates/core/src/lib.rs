pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod svg;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
