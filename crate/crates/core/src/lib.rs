pub mod archive;
pub mod cli;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod lens;
pub mod model;
pub mod planted;
pub mod scoring;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
