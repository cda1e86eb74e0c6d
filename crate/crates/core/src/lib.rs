pub mod archive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod nn;
pub mod params;
pub mod training;

pub use error::{Error, Result};
