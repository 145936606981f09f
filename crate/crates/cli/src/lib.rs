//! Pipeline orchestration behind the `objmap` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;

pub use config::PipelineConfig;
pub use error::CliError;
