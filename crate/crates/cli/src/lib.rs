//! Command-line front end for `copvi`.

pub mod artifact;
pub mod commands;
pub mod error;

pub use artifact::{FitArtifact, FitConfig, FORMAT_VERSION};
pub use commands::Cli;
pub use error::{CliError, CliResult};
