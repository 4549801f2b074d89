//! File formats, pipelines and the command line front end built on `orthodiff-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageio;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod trainlog;

pub use error::{Error, Result};
