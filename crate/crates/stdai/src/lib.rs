//! File formats, artifact layout and the `stdai` command line around the
//! `stdai-core` imputation engine.

pub mod artifacts;
pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
mod error;
pub mod features;
pub mod report;

pub use error::{Result, StageExt, StdaiError};
