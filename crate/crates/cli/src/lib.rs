//! Pipeline driver: configuration and the `synth`, `train`, `eval`,
//! `gradcheck` and `attn` commands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
