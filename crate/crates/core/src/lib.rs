pub mod distill;
pub mod error;
pub mod eval;
pub mod gradstore;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod sampler;
pub mod tasks;

pub use error::{Error, Result};
