//! File formats, configuration and the `gatera` command-line tool around
//! `gatera-core`.

pub mod checkpoint_io;
pub mod cli;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod experiments;

pub use error::{LabError, Result};
