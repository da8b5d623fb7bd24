use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{AlgorithmChoice, Overrides, Target};

#[derive(Debug, Parser)]
#[command(name = "cmp", version, about = "Fit and evaluate conditional Poisson mixtures of spike counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a ground-truth population and sample a dataset from it.
    Synth(CommonArgs),
    /// Fit models to a dataset and tabulate their curves and correlations.
    Fit(CommonArgs),
    /// Cross-validate the number of mixture components.
    Cv(CommonArgs),
    /// Build paired correlation and weight-curve tables from a fitted model.
    Report(CommonArgs),
}

impl Command {
    pub fn parts(&self) -> (Target, &CommonArgs) {
        match self {
            Command::Synth(a) => (Target::Synth, a),
            Command::Fit(a) => (Target::Fit, a),
            Command::Cv(a) => (Target::Cv, a),
            Command::Report(a) => (Target::Report, a),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgorithmArg {
    Em,
    Sgd,
    Hybrid,
    All,
}

impl From<AlgorithmArg> for AlgorithmChoice {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Em => AlgorithmChoice::Em,
            AlgorithmArg::Sgd => AlgorithmChoice::Sgd,
            AlgorithmArg::Hybrid => AlgorithmChoice::Hybrid,
            AlgorithmArg::All => AlgorithmChoice::All,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    /// Mixture components: of the ground truth for `synth`, of the model for
    /// `fit`, and the largest count tried by `cv`.
    #[arg(long, value_name = "INT")]
    pub components: Option<usize>,
    #[arg(long, value_name = "INT")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "INT")]
    pub restarts: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset CSV; defaults to `<out>/dataset.csv`.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Ground-truth JSON written by `synth`.
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            algorithm: self.algorithm.map(Into::into),
            components: self.components,
            epochs: self.epochs,
            restarts: self.restarts,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            truth: self.truth.clone(),
        }
    }
}
