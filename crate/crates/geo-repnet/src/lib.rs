//! Files, datasets, checkpoints and the command line around `geo-repnet-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod json;
pub mod tensorfile;

pub use error::{Error, Result};
