//! Dataset, model, config and report files for `stable-fi-core`, plus the
//! command implementations behind the `stable-fi` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod model_file;
pub mod report;

pub use error::{Error, Result};
