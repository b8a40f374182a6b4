pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod losses;
pub mod models;
pub mod raster;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
