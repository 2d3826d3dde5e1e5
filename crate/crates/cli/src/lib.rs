//! File formats, configuration and command implementations for the `evoedit` tool.
//!
//! - [`config`]: TOML run configuration
//! - [`checkpoint`]: binary parameter checkpoints
//! - [`data`]: JSONL corpora and tokenizer files
//! - [`manifest`]: provenance manifests and their hashes
//! - [`metrics`]: metric CSVs, summaries, seed medians and report tables
//! - [`runner`]: the commands themselves

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod runner;

pub use error::{CliError, Result};
