//! File formats, run configuration, training harness and CLI support for
//! [`dyndict_core`].

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dstn;
mod error;
pub mod fsutil;
pub mod pnm;
pub mod runner;

pub use error::{exit, Error, FormatError, Result};
