pub mod cli;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod evalrank;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod rng;
pub mod syngen;
pub mod trainer;

pub use error::{Error, Result};
