//! Datasets, file formats, run configuration and the command-line driver.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{HarnessError, Result};
