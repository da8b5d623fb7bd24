//! Conditional mixtures of independent Poisson distributions.
//!
//! The stimulus shifts the count bias of a harmonium through a linear link on
//! stimulus features, `θ_N(z) = θ_N + Θ_NZ · s(z)`. Everything that depends
//! on the stimulus goes through [`encode_stimulus`], so swapping the feature
//! map only touches that function and [`STIMULUS_FEATURES`].

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{CountVector, MeanParams, NaturalParams};
use crate::linalg::Matrix;
use crate::mixture::{HarmoniumParams, MixtureView};
use crate::scalar::Scalar;

/// Width of the stimulus feature vector.
pub const STIMULUS_FEATURES: usize = 2;

/// An orientation on the half-circle, stored reduced to `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Stimulus<T>(T);

impl<T: Scalar> Stimulus<T> {
    pub fn new(angle: T) -> Self {
        let pi = T::lit(PI);
        let mut a = angle % pi;
        if a < T::zero() {
            a = a + pi;
        }
        if a >= pi {
            a = a - pi;
        }
        Self(a)
    }

    pub fn angle(self) -> T {
        self.0
    }
}

/// Stimulus features `(cos 2z, sin 2z)`.
pub fn encode_stimulus<T: Scalar>(z: Stimulus<T>) -> [T; STIMULUS_FEATURES] {
    let two = z.0 + z.0;
    [two.cos(), two.sin()]
}

/// `k` stimuli tiled evenly over `[0, π)`.
pub fn stimulus_grid<T: Scalar>(k: usize) -> Vec<Stimulus<T>> {
    (0..k)
        .map(|i| Stimulus::new(T::lit(PI * i as f64 / k as f64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CmpParams<T> {
    pub harmonium: HarmoniumParams<T>,
    /// `m_N × STIMULUS_FEATURES` link matrix.
    pub link: Matrix<T>,
}

/// Gradient with the same layout as [`CmpParams`].
pub type CmpGradient<T> = CmpParams<T>;

impl<T: Scalar> CmpParams<T> {
    pub fn new(harmonium: HarmoniumParams<T>, link: Matrix<T>) -> Result<Self> {
        let p = Self { harmonium, link };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(neurons: usize, latent_dim: usize) -> Self {
        Self {
            harmonium: HarmoniumParams::zeros(neurons, latent_dim),
            link: Matrix::zeros(neurons, STIMULUS_FEATURES),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.harmonium.validate()?;
        if self.link.rows() != self.neurons() || self.link.cols() != STIMULUS_FEATURES {
            return Err(Error::Shape(format!(
                "link is {}x{}, expected {}x{}",
                self.link.rows(),
                self.link.cols(),
                self.neurons(),
                STIMULUS_FEATURES
            )));
        }
        if !self.link.is_finite() {
            return Err(Error::InvalidParameter("link parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn neurons(&self) -> usize {
        self.harmonium.neurons()
    }

    pub fn latent_dim(&self) -> usize {
        self.harmonium.latent_dim()
    }

    pub fn components(&self) -> usize {
        self.harmonium.components()
    }

    pub fn is_finite(&self) -> bool {
        self.harmonium.is_finite() && self.link.is_finite()
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        let h = &self.harmonium;
        h.bias_n.len() + h.bias_c.len() + h.interaction.as_slice().len() + self.link.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens as `θ_N, θ_C, Θ_NC (row-major), Θ_NZ (row-major)`.
    pub fn to_flat(&self) -> Vec<T> {
        let h = &self.harmonium;
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&h.bias_n);
        out.extend_from_slice(&h.bias_c);
        out.extend_from_slice(h.interaction.as_slice());
        out.extend_from_slice(self.link.as_slice());
        out
    }

    /// Inverse of [`CmpParams::to_flat`] using `self` for the shapes.
    pub fn assign_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let h = &mut self.harmonium;
        let (a, rest) = flat.split_at(h.bias_n.len());
        let (b, rest) = rest.split_at(h.bias_c.len());
        let (c, d) = rest.split_at(h.interaction.as_slice().len());
        h.bias_n.copy_from_slice(a);
        h.bias_c.copy_from_slice(b);
        h.interaction.as_mut_slice().copy_from_slice(c);
        self.link.as_mut_slice().copy_from_slice(d);
    }

    pub(crate) fn bias_at(&self, features: &[T; STIMULUS_FEATURES]) -> Vec<T> {
        self.harmonium
            .bias_n
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                let row = self.link.row(k);
                b + row[0] * features[0] + row[1] * features[1]
            })
            .collect()
    }

    pub(crate) fn view_at(&self, z: Stimulus<T>) -> MixtureView<T> {
        MixtureView::with_bias(&self.harmonium, &self.bias_at(&encode_stimulus(z)))
    }
}

/// Conditioned mixtures memoized by stimulus. Recorded datasets repeat a
/// handful of stimuli many times, so this removes almost all exponentials
/// from per-trial loops.
pub(crate) struct ViewCache<'a, T> {
    params: &'a CmpParams<T>,
    index: HashMap<u64, usize>,
    views: Vec<MixtureView<T>>,
}

impl<'a, T: Scalar> ViewCache<'a, T> {
    pub fn new(params: &'a CmpParams<T>) -> Self {
        Self {
            params,
            index: HashMap::new(),
            views: Vec::new(),
        }
    }

    pub fn get(&mut self, z: Stimulus<T>) -> &MixtureView<T> {
        let key = z.angle().as_f64().to_bits();
        let slot = match self.index.get(&key) {
            Some(&i) => i,
            None => {
                self.views.push(self.params.view_at(z));
                self.index.insert(key, self.views.len() - 1);
                self.views.len() - 1
            }
        };
        &self.views[slot]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Trial<T> {
    pub counts: CountVector,
    pub stimulus: Stimulus<T>,
    #[serde(skip)]
    log_base: f64,
}

impl<T: Scalar> Trial<T> {
    pub fn new(counts: CountVector, stimulus: Stimulus<T>) -> Self {
        let log_base = counts.log_base_measure();
        Self {
            counts,
            stimulus,
            log_base,
        }
    }

    /// `log μ_N({n})`, cached at construction.
    pub fn log_base_measure(&self) -> f64 {
        self.log_base
    }
}

/// Paired count vectors and stimuli.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeDataset<T> {
    trials: Vec<Trial<T>>,
    neurons: usize,
}

impl<T: Scalar> SpikeDataset<T> {
    pub fn new(trials: Vec<(CountVector, Stimulus<T>)>) -> Result<Self> {
        Self::from_trials(trials.into_iter().map(|(n, z)| Trial::new(n, z)).collect())
    }

    pub fn from_trials(trials: Vec<Trial<T>>) -> Result<Self> {
        let neurons = trials
            .first()
            .map(|t| t.counts.len())
            .ok_or_else(|| Error::InvalidParameter("dataset must contain at least one trial".into()))?;
        if let Some(i) = trials.iter().position(|t| t.counts.len() != neurons) {
            return Err(Error::Shape(format!(
                "trial {i} has {} counts, expected {neurons}",
                trials[i].counts.len()
            )));
        }
        Ok(Self { trials, neurons })
    }

    pub fn trials(&self) -> &[Trial<T>] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    /// Subset by trial indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::from_trials(indices.iter().map(|&i| self.trials[i].clone()).collect())
    }

    /// Distinct stimuli in increasing order.
    pub fn distinct_stimuli(&self) -> Vec<Stimulus<T>> {
        let mut zs: Vec<Stimulus<T>> = self.trials.iter().map(|t| t.stimulus).collect();
        zs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite angles"));
        zs.dedup();
        zs
    }
}

fn check_counts<T: Scalar>(n: &CountVector, p: &CmpParams<T>) -> Result<()> {
    if n.len() != p.neurons() {
        return Err(Error::Shape(format!(
            "count vector has {} entries, model has {} neurons",
            n.len(),
            p.neurons()
        )));
    }
    Ok(())
}

/// `θ_N + Θ_NZ · s(z)`.
pub fn conditional_bias<T: Scalar>(p: &CmpParams<T>, z: Stimulus<T>) -> NaturalParams<T> {
    NaturalParams::poisson(p.bias_at(&encode_stimulus(z))).expect("finite parameters")
}

/// The harmonium obtained by fixing the stimulus.
pub fn conditioned_harmonium<T: Scalar>(p: &CmpParams<T>, z: Stimulus<T>) -> HarmoniumParams<T> {
    HarmoniumParams {
        bias_n: p.bias_at(&encode_stimulus(z)),
        ..p.harmonium.clone()
    }
}

pub fn conditional_log_density<T: Scalar>(n: &CountVector, z: Stimulus<T>, p: &CmpParams<T>) -> Result<T> {
    check_counts(n, p)?;
    let view = p.view_at(z);
    let mut scratch = vec![T::zero(); p.components()];
    Ok(view.marginal_log_density(n.as_slice(), T::lit(n.log_base_measure()), &mut scratch))
}

/// Mean conditional log-likelihood per trial.
pub fn conditional_log_likelihood<T: Scalar>(d: &SpikeDataset<T>, p: &CmpParams<T>) -> Result<T> {
    if d.neurons() != p.neurons() {
        return Err(Error::Shape(format!(
            "dataset has {} neurons, model has {}",
            d.neurons(),
            p.neurons()
        )));
    }
    let mut scratch = vec![T::zero(); p.components()];
    let mut total = T::zero();
    let mut cache = ViewCache::new(p);
    for t in d.trials() {
        let view = cache.get(t.stimulus);
        total = total + view.marginal_log_density(t.counts.as_slice(), T::lit(t.log_base), &mut scratch);
    }
    Ok(total / T::from_usize(d.len()).expect("dataset size"))
}

/// Posterior over components given counts and stimulus. The stimulus only
/// shifts the count bias, which cancels between components, so the result
/// does not depend on `z`.
pub fn responsibilities<T: Scalar>(n: &CountVector, z: Stimulus<T>, p: &CmpParams<T>) -> Result<MeanParams<T>> {
    check_counts(n, p)?;
    let view = p.view_at(z);
    let mut resp = vec![T::zero(); p.components()];
    view.posterior_into(n.as_slice(), T::lit(n.log_base_measure()), &mut resp);
    Ok(MeanParams::categorical_unchecked(resp[1..].to_vec()))
}

/// One row per stimulus with all `m_C + 1` mixture weights.
pub fn weight_curve<T: Scalar>(p: &CmpParams<T>, grid: &[Stimulus<T>]) -> Result<Matrix<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("stimulus grid is empty".into()));
    }
    let rows: Vec<Vec<T>> = grid.iter().map(|&z| p.view_at(z).weights).collect();
    Ok(Matrix::from_rows(&rows))
}

/// `E[N_k | z]` for every stimulus in the grid.
pub fn tuning_curves<T: Scalar>(p: &CmpParams<T>, grid: &[Stimulus<T>]) -> Result<Matrix<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("stimulus grid is empty".into()));
    }
    let rows: Vec<Vec<T>> = grid.iter().map(|&z| p.view_at(z).mean_counts()).collect();
    Ok(Matrix::from_rows(&rows))
}

/// Stimulus-conditioned count moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Moments<T> {
    pub mean: Vec<T>,
    pub covariance: Matrix<T>,
    pub correlation: Matrix<T>,
    /// Neurons whose variance is zero; their off-diagonal correlations are 0.
    pub undefined: Vec<usize>,
}

/// Normalizes a covariance matrix. Zero-variance rows get 0 off the diagonal
/// and are reported in the returned index list.
pub fn covariance_to_correlation<T: Scalar>(cov: &Matrix<T>) -> (Matrix<T>, Vec<usize>) {
    let m = cov.rows();
    let sd: Vec<T> = (0..m).map(|i| cov.get(i, i).max(T::zero()).sqrt()).collect();
    let undefined: Vec<usize> = (0..m).filter(|&i| !(sd[i] > T::zero())).collect();
    let mut corr = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let v = if i == j {
                T::one()
            } else if sd[i] > T::zero() && sd[j] > T::zero() {
                (cov.get(i, j) / (sd[i] * sd[j])).max(-T::one()).min(T::one())
            } else {
                T::zero()
            };
            corr.set(i, j, v);
        }
    }
    (corr, undefined)
}

pub fn conditioned_moments<T: Scalar>(p: &CmpParams<T>, z: Stimulus<T>) -> Moments<T> {
    let view = p.view_at(z);
    let m = p.neurons();
    let mean = view.mean_counts();
    let mut cov = Matrix::zeros(m, m);
    for j in 0..view.components() {
        let w = view.weights[j];
        let rates = view.rates.row(j);
        for a in 0..m {
            for b in 0..m {
                let v = cov.get(a, b) + w * rates[a] * rates[b];
                cov.set(a, b, v);
            }
            let v = cov.get(a, a) + w * rates[a];
            cov.set(a, a, v);
        }
    }
    for a in 0..m {
        for b in 0..m {
            let v = cov.get(a, b) - mean[a] * mean[b];
            cov.set(a, b, v);
        }
    }
    let (correlation, undefined) = covariance_to_correlation(&cov);
    if !undefined.is_empty() {
        log::warn!(
            "zero variance for neurons {undefined:?} at z = {}; correlations set to 0",
            z.angle()
        );
    }
    Moments {
        mean,
        covariance: cov,
        correlation,
        undefined,
    }
}

/// Adds the gradient of the log-likelihood surrogate at one trial, given the
/// component responsibilities `resp` (all `m_C + 1` entries), into `grad`.
pub(crate) fn accumulate_trial_gradient<T: Scalar>(
    view: &MixtureView<T>,
    trial: &Trial<T>,
    resp: &[T],
    scale: T,
    grad: &mut CmpGradient<T>,
    mean_buf: &mut [T],
) {
    view.accumulate_gradient(trial.counts.as_slice(), resp, scale, &mut grad.harmonium, mean_buf);
    let s = encode_stimulus(trial.stimulus);
    for (k, &n) in trial.counts.as_slice().iter().enumerate() {
        let err = scale * (T::from_count(n) - mean_buf[k]);
        let row = grad.link.row_mut(k);
        row[0] = row[0] + err * s[0];
        row[1] = row[1] + err * s[1];
    }
}

/// Gradient of `log q(n | z)` with respect to all four parameter blocks.
pub fn conditional_ll_gradients<T: Scalar>(n: &CountVector, z: Stimulus<T>, p: &CmpParams<T>) -> Result<CmpGradient<T>> {
    check_counts(n, p)?;
    let trial = Trial::new(n.clone(), z);
    let view = p.view_at(z);
    let mut resp = vec![T::zero(); p.components()];
    view.posterior_into(n.as_slice(), T::lit(trial.log_base), &mut resp);
    let mut grad = CmpParams::zeros(p.neurons(), p.latent_dim());
    let mut buf = vec![T::zero(); p.neurons()];
    accumulate_trial_gradient(&view, &trial, &resp, T::one(), &mut grad, &mut buf);
    Ok(grad)
}
