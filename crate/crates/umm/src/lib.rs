//! File formats, configuration, checkpoints and the command-line driver
//! around `umm_core`.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod fsutil;
pub mod report;

pub use error::{Result, UmmError};
