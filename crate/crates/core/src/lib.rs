//! Sub-seasonal temperature forecasting toolkit.

pub mod cli;
pub mod climatology;
pub mod deepnet;
pub mod diagnostics;
pub mod eof;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod gbt;
pub mod ingest;
pub mod linmodels;
pub mod synthgen;
pub mod timegrid;

pub use error::{Error, Result};
