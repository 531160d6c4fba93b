//! File formats, checkpoints, run orchestration and the command line for the
//! transfergrid benchmark. The numerical work lives in `transfergrid-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod fsutil;
pub mod pipeline;

pub use error::{Error, Result};
