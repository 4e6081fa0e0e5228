//! Command implementations behind the `hemoscale` binary.
//!
//! Every command reads a [`config::RunConfig`], writes CSV/JSON into an output
//! directory and finishes with a `<command>.manifest.json` that records the
//! resolved configuration and seed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::path::Path;

use thiserror::Error;

pub use commands::{cmd_ensemble, cmd_fluct, cmd_limits, cmd_scaling_study, cmd_simulate, cmd_validate, CommandOutput};
pub use config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandName {
    Simulate,
    Ensemble,
    Limits,
    Fluct,
    ScalingStudy,
    Validate,
}

pub fn dispatch(command: CommandName, cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    match command {
        CommandName::Simulate => cmd_simulate(cfg, out),
        CommandName::Ensemble => cmd_ensemble(cfg, out),
        CommandName::Limits => cmd_limits(cfg, out),
        CommandName::Fluct => cmd_fluct(cfg, out),
        CommandName::ScalingStudy => cmd_scaling_study(cfg, out),
        CommandName::Validate => cmd_validate(cfg, out),
    }
}
