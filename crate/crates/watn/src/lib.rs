//! IO companion to `watn-core`: on-disk formats (checkpoint, dataset
//! directory, grammar file, train config), CSV/SVG report emission, and the
//! `watn` command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config_file;
pub mod dataset_io;
pub mod error;
pub mod grammar;
pub mod report;
pub mod svg;

pub use error::FormatError;
