//! File formats, thread pool and command line for `multicolumn-core`.

pub mod checkpoint_file;
pub mod cli;
pub mod corpus_file;
pub mod error;
pub mod parallel;
pub mod report;

pub use error::{Error, FormatError, Result};
