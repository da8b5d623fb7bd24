//! Run configuration: defaults, an optional TOML file, then command-line
//! overrides, in increasing order of precedence.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use cmp_core::{Algorithm, GroundTruthSpec, SamplingPlan, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// `--algorithm` values: one trainer or all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmChoice {
    Em,
    Sgd,
    Hybrid,
    All,
}

impl AlgorithmChoice {
    pub fn algorithms(self) -> Vec<Algorithm> {
        match self {
            AlgorithmChoice::Em => vec![Algorithm::Em],
            AlgorithmChoice::Sgd => vec![Algorithm::Sgd],
            AlgorithmChoice::Hybrid => vec![Algorithm::Hybrid],
            AlgorithmChoice::All => Algorithm::ALL.to_vec(),
        }
    }

    /// The single algorithm whose model downstream commands read; `all`
    /// resolves to Hybrid.
    pub fn primary(self) -> Algorithm {
        match self {
            AlgorithmChoice::Em => Algorithm::Em,
            AlgorithmChoice::Sgd => Algorithm::Sgd,
            AlgorithmChoice::Hybrid | AlgorithmChoice::All => Algorithm::Hybrid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub neurons: usize,
    /// Number of ground-truth mixture components.
    pub components: usize,
    pub precision_mean: f64,
    pub gain_mean: f64,
    pub log_sigma: f64,
    pub weight_bias_scale: f64,
    pub stimulus_count: usize,
    pub trials_per_stimulus: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let spec = GroundTruthSpec::default();
        let plan = SamplingPlan::default();
        Self {
            neurons: spec.neurons,
            components: spec.latent_dim + 1,
            precision_mean: spec.precision_mean,
            gain_mean: spec.gain_mean,
            log_sigma: spec.log_sigma,
            weight_bias_scale: spec.weight_bias_scale,
            stimulus_count: plan.stimulus_count,
            trials_per_stimulus: plan.trials_per_stimulus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub algorithm: AlgorithmChoice,
    /// Number of model mixture components.
    pub components: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub restarts: usize,
    pub reset_adam_each_epoch: bool,
    pub hybrid_closed_form_first: bool,
    /// Points on `[0, π)` at which fitted curves are tabulated.
    pub curve_points: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            algorithm: AlgorithmChoice::Hybrid,
            components: 8,
            epochs: t.epochs,
            minibatch_size: t.minibatch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            restarts: t.restarts,
            reset_adam_each_epoch: t.reset_adam_each_epoch,
            hybrid_closed_form_first: t.hybrid_closed_form_first,
            curve_points: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    /// Component counts to compare; must contain 1.
    pub grid: Vec<usize>,
}

impl Default for CvSection {
    fn default() -> Self {
        Self {
            folds: 10,
            grid: (1..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Requested stimuli in radians; each snaps to the nearest dataset stimulus.
    pub stimuli: Vec<f64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            stimuli: vec![0.0, 0.33 * PI, 0.67 * PI],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Defaults to `<out>/dataset.csv`.
    pub dataset: Option<PathBuf>,
    /// Ground-truth JSON written by `synth`; enables the lower bound and
    /// truth-paired tables.
    pub truth: Option<PathBuf>,
    pub synth: SynthSection,
    pub fit: FitSection,
    pub cv: CvSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            truth: None,
            synth: SynthSection::default(),
            fit: FitSection::default(),
            cv: CvSection::default(),
            report: ReportSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub algorithm: Option<AlgorithmChoice>,
    pub components: Option<usize>,
    pub epochs: Option<usize>,
    pub restarts: Option<usize>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

/// Which command is being configured; `--components` means different things.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Synth,
    Fit,
    Cv,
    Report,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    CliError::Config(format!("line {line}, column {column}: {message}"))
                }
                None => CliError::Config(message),
            }
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides, target: Target) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(a) = o.algorithm {
            self.fit.algorithm = a;
        }
        if let Some(c) = o.components {
            match target {
                Target::Synth => self.synth.components = c,
                Target::Fit | Target::Report => self.fit.components = c,
                Target::Cv => self.cv.grid = (1..=c).collect(),
            }
        }
        if let Some(e) = o.epochs {
            self.fit.epochs = e;
        }
        if let Some(r) = o.restarts {
            self.fit.restarts = r;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(d) = &o.dataset {
            self.dataset = Some(d.clone());
        }
        if let Some(t) = &o.truth {
            self.truth = Some(t.clone());
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset.csv"))
    }

    pub fn ground_truth_spec(&self) -> GroundTruthSpec {
        GroundTruthSpec {
            neurons: self.synth.neurons,
            latent_dim: self.synth.components.saturating_sub(1),
            pref_stim_seed: self.seed,
            precision_mean: self.synth.precision_mean,
            gain_mean: self.synth.gain_mean,
            log_sigma: self.synth.log_sigma,
            weight_bias_scale: self.synth.weight_bias_scale,
        }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        SamplingPlan {
            stimulus_count: self.synth.stimulus_count,
            trials_per_stimulus: self.synth.trials_per_stimulus,
            rng_seed: self.seed,
        }
    }

    pub fn train_config(&self, algorithm: Algorithm) -> TrainConfig {
        let f = &self.fit;
        TrainConfig {
            algorithm,
            epochs: f.epochs,
            minibatch_size: f.minibatch_size,
            learning_rate: f.learning_rate,
            adam_beta1: f.adam_beta1,
            adam_beta2: f.adam_beta2,
            adam_epsilon: f.adam_epsilon,
            restarts: f.restarts,
            rng_seed: self.seed,
            reset_adam_each_epoch: f.reset_adam_each_epoch,
            hybrid_closed_form_first: f.hybrid_closed_form_first,
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self, target: Target) -> CliResult<()> {
        let fail = |m: &str| Err(CliError::Config(m.to_string()));
        match target {
            Target::Synth => {
                if self.synth.components == 0 {
                    return fail("synth.components must be at least 1");
                }
                if self.synth.stimulus_count == 0 || self.synth.trials_per_stimulus == 0 {
                    return fail("synth.stimulus_count and synth.trials_per_stimulus must be positive");
                }
                self.ground_truth_spec().validate()?;
            }
            Target::Fit | Target::Cv | Target::Report => {
                if self.fit.components == 0 {
                    return fail("fit.components must be at least 1");
                }
                if self.fit.curve_points == 0 {
                    return fail("fit.curve_points must be positive");
                }
                let cfg = self.train_config(Algorithm::Hybrid);
                // Dataset size is unknown here; the batch-size check happens later.
                cfg.validate(cfg.minibatch_size.max(1))?;
            }
        }
        if target == Target::Cv {
            if self.fit.algorithm == AlgorithmChoice::All {
                return fail("cross-validation needs a single algorithm, not `all`");
            }
            if self.cv.folds < 2 {
                return fail("cv.folds must be at least 2");
            }
            if !self.cv.grid.contains(&1) || self.cv.grid.contains(&0) {
                return fail("cv.grid must contain 1 and only positive component counts");
            }
        }
        if target == Target::Report && self.report.stimuli.iter().any(|z| !z.is_finite()) {
            return fail("report.stimuli must be finite");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[fit]\nepoch = 3").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut cfg = RunConfig::from_toml("seed = 5\n[fit]\nepochs = 7\nrestarts = 3").unwrap();
        assert_eq!(cfg.fit.minibatch_size, 50);
        let o = Overrides {
            epochs: Some(11),
            ..Overrides::default()
        };
        cfg.apply(&o, Target::Fit);
        assert_eq!((cfg.seed, cfg.fit.epochs, cfg.fit.restarts), (5, 11, 3));
    }

    #[test]
    fn components_flag_depends_on_command() {
        let o = Overrides {
            components: Some(4),
            ..Overrides::default()
        };
        let mut cfg = RunConfig::default();
        cfg.apply(&o, Target::Cv);
        assert_eq!(cfg.cv.grid, vec![1, 2, 3, 4]);
        cfg.apply(&o, Target::Synth);
        assert_eq!(cfg.synth.components, 4);
        assert_eq!(cfg.ground_truth_spec().latent_dim, 3);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.cv.grid = vec![2, 3];
        assert!(matches!(cfg.validate(Target::Cv), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.fit.learning_rate = -1.0;
        assert!(cfg.validate(Target::Fit).is_err());
        assert!(RunConfig::default().validate(Target::Synth).is_ok());
    }
}
