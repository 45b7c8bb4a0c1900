pub mod boundary;
pub mod cli;
pub mod correlations;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod measure;
pub mod seed;

pub use error::{Error, Result};
