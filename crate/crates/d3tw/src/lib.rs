//! IO, file formats, and the command line for the alignment engine.
//!
//! The numerics live in `d3tw-core`; this crate adds everything that
//! touches the filesystem: dataset layout and parsing, synthetic data
//! generation, model checkpoints, prediction files, and the `d3tw`
//! binary with its `gen`, `train`, `align`, `segment`, and `eval`
//! commands.

pub mod checkpoint;
pub mod cli;
pub mod data;
mod error;
pub mod predict;

pub use error::{Error, Result};
