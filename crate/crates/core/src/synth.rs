//! Synthetic ground-truth populations with von Mises tuning and
//! component-dependent gains.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::cmp::{stimulus_grid, CmpParams, SpikeDataset, Trial};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixture::sample_from_view;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub neurons: usize,
    /// Number of components minus one.
    pub latent_dim: usize,
    pub pref_stim_seed: u64,
    /// Mean of the log-normal precision distribution.
    pub precision_mean: f64,
    /// Mean of the log-normal gain distribution.
    pub gain_mean: f64,
    /// Standard deviation in log space for both precisions and gains.
    pub log_sigma: f64,
    /// Standard deviation of the weight biases.
    pub weight_bias_scale: f64,
}

impl Default for GroundTruthSpec {
    fn default() -> Self {
        Self {
            neurons: 20,
            latent_dim: 7,
            pref_stim_seed: 0,
            precision_mean: 0.8,
            gain_mean: 2.0,
            log_sigma: 0.5,
            weight_bias_scale: 1.0,
        }
    }
}

impl GroundTruthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.neurons == 0 {
            return Err(Error::Config("ground truth needs at least one neuron".into()));
        }
        if !(self.precision_mean > 0.0 && self.gain_mean > 0.0) {
            return Err(Error::Config("precision and gain means must be positive".into()));
        }
        if !(self.log_sigma >= 0.0 && self.weight_bias_scale >= 0.0) {
            return Err(Error::Config("scales must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub stimulus_count: usize,
    pub trials_per_stimulus: usize,
    pub rng_seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            stimulus_count: 8,
            trials_per_stimulus: 62,
            rng_seed: 0,
        }
    }
}

/// A generated population together with the quantities it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruth<T> {
    pub params: CmpParams<T>,
    pub preferred_stimuli: Vec<T>,
    pub precisions: Vec<T>,
    /// `(m_C + 1) × m_N` gains.
    pub gains: Matrix<T>,
}

fn log_normal_with_mean(mean: f64, sigma: f64) -> LogNormal<f64> {
    // E[X] = exp(μ + σ²/2).
    LogNormal::new(mean.ln() - 0.5 * sigma * sigma, sigma).expect("valid log-normal")
}

/// Draws a ground-truth CMP. Component `j` fires at `γ_jk · exp(ρ_k cos 2(z - μ_k))`.
pub fn generate_ground_truth_detailed<T: Scalar>(spec: &GroundTruthSpec) -> Result<GroundTruth<T>> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.pref_stim_seed);
    let m_n = spec.neurons;
    let k = spec.latent_dim + 1;
    let preferred: Vec<f64> = (0..m_n).map(|_| rng.random_range(0.0..PI)).collect();
    let precision_dist = log_normal_with_mean(spec.precision_mean, spec.log_sigma);
    let precisions: Vec<f64> = (0..m_n).map(|_| precision_dist.sample(&mut rng)).collect();
    let gain_dist = log_normal_with_mean(spec.gain_mean, spec.log_sigma);
    let gains: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..m_n).map(|_| gain_dist.sample(&mut rng)).collect())
        .collect();
    let bias_dist = Normal::new(0.0, spec.weight_bias_scale).expect("valid normal");
    let bias_c: Vec<f64> = (0..spec.latent_dim).map(|_| bias_dist.sample(&mut rng)).collect();

    let mut p = CmpParams::zeros(m_n, spec.latent_dim);
    for i in 0..m_n {
        let rho = precisions[i];
        let mu = preferred[i];
        p.link.set(i, 0, T::lit(rho * (2.0 * mu).cos()));
        p.link.set(i, 1, T::lit(rho * (2.0 * mu).sin()));
        let log_g0 = gains[0][i].ln();
        p.harmonium.bias_n[i] = T::lit(log_g0);
        for j in 1..k {
            p.harmonium.interaction.set(j - 1, i, T::lit(gains[j][i].ln() - log_g0));
        }
    }
    p.harmonium.bias_c = bias_c.into_iter().map(T::lit).collect();
    Ok(GroundTruth {
        params: p,
        preferred_stimuli: preferred.into_iter().map(T::lit).collect(),
        precisions: precisions.into_iter().map(T::lit).collect(),
        gains: Matrix::from_rows(&gains).map(T::lit),
    })
}

pub fn generate_ground_truth<T: Scalar>(spec: &GroundTruthSpec) -> Result<CmpParams<T>> {
    generate_ground_truth_detailed(spec).map(|g| g.params)
}

/// Samples `trials_per_stimulus` responses at each of `stimulus_count` evenly
/// tiled stimuli; latent components are discarded.
pub fn sample_dataset<T: Scalar>(p: &CmpParams<T>, plan: &SamplingPlan) -> Result<SpikeDataset<T>> {
    if plan.stimulus_count == 0 || plan.trials_per_stimulus == 0 {
        return Err(Error::Config("sampling plan counts must be positive".into()));
    }
    let mut trials = Vec::with_capacity(plan.stimulus_count * plan.trials_per_stimulus);
    for (s, z) in stimulus_grid::<T>(plan.stimulus_count).into_iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(plan.rng_seed, s as u64));
        let view = p.view_at(z);
        for _ in 0..plan.trials_per_stimulus {
            let (_, n) = sample_from_view(&view, &mut rng);
            trials.push(Trial::new(n, z));
        }
    }
    SpikeDataset::from_trials(trials)
}
