//! Conditional finite mixtures of independent Poisson distributions.
//!
//! A model of stimulus-dependent, correlated spike counts: each neuron's rate
//! follows a von Mises-shaped tuning curve, and a latent category modulates
//! the gains of the whole population, inducing noise correlations whose
//! structure changes with the stimulus.
//!
//! - [`expfam`]: categorical and independent-Poisson exponential families.
//! - [`mixture`]: harmonium/mixture coordinates, densities, EM and gradients.
//! - [`cmp`]: stimulus-conditioned mixtures, tuning and weight curves, moments.
//! - [`training`]: EM, SGD and Hybrid trainers with multi-restart fitting.
//! - [`synth`]: ground-truth populations and synthetic datasets.
//! - [`eval`]: likelihood bounds, cross-validation and empirical correlations.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the usual double-precision instantiation.

pub mod cmp;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod linalg;
pub mod mixture;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod training;

pub use cmp::{
    conditional_bias, conditional_ll_gradients, conditional_log_density, conditional_log_likelihood,
    conditioned_harmonium, conditioned_moments, encode_stimulus, responsibilities, stimulus_grid, tuning_curves,
    weight_curve, CmpGradient, CmpParams, Moments, SpikeDataset, Stimulus, Trial,
};
pub use error::{Error, Result};
pub use eval::{
    bounds, empirical_correlations, ground_truth_nll, kfold_cv, one_component_fit, select_components,
    BoundsReport, CvConfig, CvReport, OneComponentConfig, StimulusCorrelation,
};
pub use expfam::{CountVector, Family, MeanParams, NaturalParams};
pub use linalg::Matrix;
pub use mixture::{HarmoniumMeans, HarmoniumParams, MixtureParams};
pub use scalar::Scalar;
pub use synth::{
    generate_ground_truth, generate_ground_truth_detailed, sample_dataset, GroundTruth, GroundTruthSpec, SamplingPlan,
};
pub use training::{fit, Algorithm, FitReport, TrainConfig};

pub type CmpParams64 = CmpParams<f64>;
pub type CmpParams32 = CmpParams<f32>;
pub type HarmoniumParams64 = HarmoniumParams<f64>;
pub type HarmoniumParams32 = HarmoniumParams<f32>;
pub type SpikeDataset64 = SpikeDataset<f64>;
pub type SpikeDataset32 = SpikeDataset<f32>;
pub type Stimulus64 = Stimulus<f64>;
pub type FitReport64 = FitReport<f64>;
pub type Matrix64 = Matrix<f64>;
