//! Command-line orchestration for conditional Poisson mixture experiments:
//! synthesis, fitting, cross-validation and report tables.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use args::Command;
use config::{RunConfig, Target};
use error::CliResult;

/// Resolves the configuration for `command` and runs it, returning the
/// paths it wrote.
pub fn run(command: &Command) -> CliResult<Vec<PathBuf>> {
    let (target, args) = command.parts();
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&args.overrides(), target);
    cfg.validate(target)?;
    match target {
        Target::Synth => commands::synth(&cfg),
        Target::Fit => commands::fit_command(&cfg),
        Target::Cv => commands::cv_command(&cfg),
        Target::Report => commands::report_command(&cfg),
    }
}
