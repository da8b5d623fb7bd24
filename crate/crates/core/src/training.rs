//! Trainers for conditional Poisson mixtures: minibatch SGD on the
//! conditional log-likelihood, EM with a gradient M-step, and the Hybrid
//! scheme that alternates SGD epochs with a closed-form update of the count
//! bias and interaction matrix.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmp::{
    accumulate_trial_gradient, conditional_log_likelihood, encode_stimulus, CmpGradient, CmpParams, SpikeDataset,
    ViewCache,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{Scalar, NATURAL_CLAMP};
use crate::seed::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Em,
    Sgd,
    Hybrid,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Em, Algorithm::Sgd, Algorithm::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Em => "em",
            Algorithm::Sgd => "sgd",
            Algorithm::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Algorithm::Em),
            "sgd" => Ok(Algorithm::Sgd),
            "hybrid" => Ok(Algorithm::Hybrid),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub restarts: usize,
    pub rng_seed: u64,
    pub reset_adam_each_epoch: bool,
    /// Run the closed-form phase on even epochs instead of odd ones.
    pub hybrid_closed_form_first: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Hybrid,
            epochs: 100,
            minibatch_size: 50,
            learning_rate: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            restarts: 10,
            rng_seed: 0,
            reset_adam_each_epoch: true,
            hybrid_closed_form_first: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be positive".into()));
        }
        if self.minibatch_size == 0 || self.minibatch_size > dataset_len {
            return Err(Error::Config(format!(
                "minibatch size {} must be in 1..={dataset_len}",
                self.minibatch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.first_moment.iter_mut().for_each(|m| *m = T::zero());
        self.second_moment.iter_mut().for_each(|v| *v = T::zero());
        self.step_count = 0;
    }
}

/// One bias-corrected Adam ascent step on a flat parameter vector. Entries are
/// clamped to `[-30, 30]` afterwards.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient length");
    assert_eq!(params.len(), state.first_moment.len(), "Adam state length");
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step_count += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let t = i32::try_from(state.step_count).unwrap_or(i32::MAX);
    let correction1 = T::one() - b1.powi(t);
    let correction2 = T::one() - b2.powi(t);
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let clamp = T::lit(NATURAL_CLAMP);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (T::one() - b1) * g;
        let v = b2 * state.second_moment[i] + (T::one() - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / correction1;
        let v_hat = v / correction2;
        let next = params[i] + lr * m_hat / (v_hat.sqrt() + eps);
        params[i] = next.max(-clamp).min(clamp);
    }
    Ok(())
}

/// Adam ascent on CMP parameters.
pub fn adam_update<T: Scalar>(
    params: &mut CmpParams<T>,
    grads: &CmpGradient<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut flat = params.to_flat();
    adam_step(&mut flat, &grads.to_flat(), state, cfg)?;
    params.assign_flat(&flat);
    Ok(())
}

/// Mutable state threaded through the epochs of one descent.
#[derive(Debug, Clone)]
pub struct DescentState<T> {
    pub adam: AdamState<T>,
    pub rng: Rng,
    pub warnings: Vec<String>,
}

impl<T: Scalar> DescentState<T> {
    pub fn new(params: &CmpParams<T>, seed: u64) -> Self {
        Self {
            adam: AdamState::new(params.len()),
            rng: rng_from_seed(seed),
            warnings: Vec::new(),
        }
    }
}

/// Lower clamp on the initial per-neuron rate.
pub const MIN_INIT_RATE: f64 = 1e-3;

/// Random initialization. The count bias starts at the log grand-mean rate,
/// interaction and link entries are drawn from `Normal(0, 0.1²)`.
pub fn init_params<T: Scalar>(
    neurons: usize,
    latent_dim: usize,
    d: &SpikeDataset<T>,
    rng: &mut Rng,
) -> Result<(CmpParams<T>, Vec<String>)> {
    if d.neurons() != neurons {
        return Err(Error::Shape(format!(
            "dataset has {} neurons, requested {neurons}",
            d.neurons()
        )));
    }
    let mut warnings = Vec::new();
    let mut p = CmpParams::zeros(neurons, latent_dim);
    let total = d.len() as f64;
    for k in 0..neurons {
        let mean = d.trials().iter().map(|t| f64::from(t.counts.0[k])).sum::<f64>() / total;
        if mean < MIN_INIT_RATE {
            let msg = format!("neuron {k} is silent; initial rate clamped to {MIN_INIT_RATE}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        p.harmonium.bias_n[k] = T::lit(mean.max(MIN_INIT_RATE).ln());
    }
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    for v in p.harmonium.interaction.as_mut_slice() {
        *v = T::lit(normal.sample(rng));
    }
    for v in p.link.as_mut_slice() {
        *v = T::lit(normal.sample(rng));
    }
    Ok((p, warnings))
}

fn minibatches(len: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Gradient of the mean log-likelihood (or of the EM surrogate when `frozen`
/// holds per-trial responsibilities) over a batch of trials.
fn batch_gradient<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &CmpParams<T>,
    batch: &[usize],
    frozen: Option<&[Vec<T>]>,
) -> CmpGradient<T> {
    let mut grad = CmpParams::zeros(p.neurons(), p.latent_dim());
    let mut resp = vec![T::zero(); p.components()];
    let mut buf = vec![T::zero(); p.neurons()];
    let scale = T::one() / T::from_usize(batch.len()).expect("batch size");
    let mut cache = ViewCache::new(p);
    for &i in batch {
        let trial = &d.trials()[i];
        let view = cache.get(trial.stimulus);
        let r: &[T] = match frozen {
            Some(all) => &all[i],
            None => {
                view.posterior_into(trial.counts.as_slice(), T::lit(trial.log_base_measure()), &mut resp);
                &resp
            }
        };
        accumulate_trial_gradient(view, trial, r, scale, &mut grad, &mut buf);
    }
    grad
}

/// Full responsibility vectors (`m_C + 1` entries) for every trial.
pub fn all_responsibilities<T: Scalar>(d: &SpikeDataset<T>, p: &CmpParams<T>) -> Vec<Vec<T>> {
    let mut cache = ViewCache::new(p);
    d.trials()
        .iter()
        .map(|t| {
            let mut r = vec![T::zero(); p.components()];
            cache
                .get(t.stimulus)
                .posterior_into(t.counts.as_slice(), T::lit(t.log_base_measure()), &mut r);
            r
        })
        .collect()
}

/// Mean gradient of the log-likelihood over the given trials.
pub fn mean_ll_gradient<T: Scalar>(d: &SpikeDataset<T>, p: &CmpParams<T>, trials: &[usize]) -> CmpGradient<T> {
    batch_gradient(d, p, trials, None)
}

/// Mean gradient of the EM surrogate with frozen responsibilities.
pub fn mean_surrogate_gradient<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &CmpParams<T>,
    frozen: &[Vec<T>],
    trials: &[usize],
) -> CmpGradient<T> {
    batch_gradient(d, p, trials, Some(frozen))
}

/// Mean over trials of the expected complete-data objective with frozen
/// responsibilities, without the base-measure term.
pub fn em_surrogate<T: Scalar>(d: &SpikeDataset<T>, p: &CmpParams<T>, frozen: &[Vec<T>]) -> T {
    let mut total = T::zero();
    let mut cache = ViewCache::new(p);
    for (t, r) in d.trials().iter().zip(frozen) {
        let view = cache.get(t.stimulus);
        let bias = view.comp_theta.row(0);
        let counts = t.counts.as_slice();
        let mut v = T::zero();
        for (&n, &b) in counts.iter().zip(bias) {
            v = v + T::from_count(n) * b;
        }
        for j in 1..p.components() {
            let row = p.harmonium.interaction.row(j - 1);
            let mut proj = p.harmonium.bias_c[j - 1];
            for (&n, &w) in counts.iter().zip(row) {
                proj = proj + T::from_count(n) * w;
            }
            v = v + r[j] * proj;
        }
        // ψ_N(θ_N(z)) = ψ of component 0; ψ_C(θ*_C(z)) = -log w_0.
        v = v - view.comp_psi[0] + view.log_weights[0];
        total = total + v;
    }
    total / T::from_usize(d.len()).expect("dataset size")
}

fn step_batches<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &mut CmpParams<T>,
    cfg: &TrainConfig,
    state: &mut DescentState<T>,
    frozen: Option<&[Vec<T>]>,
) -> Result<()> {
    if cfg.reset_adam_each_epoch {
        state.adam.reset();
    }
    let adam = cfg.adam();
    for batch in minibatches(d.len(), cfg.minibatch_size, &mut state.rng) {
        let grad = batch_gradient(d, p, &batch, frozen);
        adam_update(p, &grad, &mut state.adam, &adam)?;
    }
    Ok(())
}

/// One pass of minibatched Adam ascent on the conditional log-likelihood.
pub fn sgd_epoch<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &mut CmpParams<T>,
    cfg: &TrainConfig,
    state: &mut DescentState<T>,
) -> Result<()> {
    step_batches(d, p, cfg, state, None)
}

/// One EM epoch: responsibilities are computed once and frozen, then one
/// pass of minibatched Adam ascent on the surrogate.
pub fn em_epoch<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &mut CmpParams<T>,
    cfg: &TrainConfig,
    state: &mut DescentState<T>,
) -> Result<()> {
    let frozen = all_responsibilities(d, p);
    step_batches(d, p, cfg, state, Some(&frozen))
}

/// Floor applied to degenerate numerators of the closed-form update.
pub const CLOSED_FORM_EPSILON: f64 = 1e-8;

/// Newton iterations used to refit the weight bias after a closed-form step.
const WEIGHT_REFIT_ITERATIONS: usize = 50;

/// Per-component count parameters maximizing the Poisson part of the EM
/// surrogate for the given responsibilities: a `(m_C + 1) × m_N` matrix with
/// entries `log(Σ_i r_ij N_ik / Σ_i r_ij exp(link_k · s(z_i)))`.
pub fn closed_form_rates<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &CmpParams<T>,
    resp: &[Vec<T>],
) -> Result<(Matrix<T>, Vec<String>)> {
    if d.neurons() != p.neurons() {
        return Err(Error::Shape("dataset and model disagree on neuron count".into()));
    }
    if resp.len() != d.len() {
        return Err(Error::Shape("one responsibility vector per trial is required".into()));
    }
    let k = p.components();
    let m_n = p.neurons();
    let mut num = Matrix::<T>::zeros(k, m_n);
    let mut den = Matrix::<T>::zeros(k, m_n);
    let mut link_rate = vec![T::zero(); m_n];
    for (t, r) in d.trials().iter().zip(resp) {
        let s = encode_stimulus(t.stimulus);
        for (i, lr) in link_rate.iter_mut().enumerate() {
            let row = p.link.row(i);
            *lr = (row[0] * s[0] + row[1] * s[1]).exp();
        }
        for j in 0..k {
            let rj = r[j];
            let num_row = num.row_mut(j);
            for (acc, &c) in num_row.iter_mut().zip(t.counts.as_slice()) {
                *acc = *acc + rj * T::from_count(c);
            }
            let den_row = den.row_mut(j);
            for (acc, &e) in den_row.iter_mut().zip(&link_rate) {
                *acc = *acc + rj * e;
            }
        }
    }
    let mut warnings = Vec::new();
    let eps = T::lit(CLOSED_FORM_EPSILON);
    let clamp = T::lit(NATURAL_CLAMP);
    let mut dagger = Matrix::<T>::zeros(k, m_n);
    for j in 0..k {
        for i in 0..m_n {
            let mut a = num.get(j, i);
            let mut b = den.get(j, i);
            if !(a > T::zero()) {
                warnings.push(format!(
                    "component {j} has no expected counts for neuron {i}; numerator clamped to {CLOSED_FORM_EPSILON}"
                ));
                a = eps;
            }
            if !(b > T::zero()) {
                warnings.push(format!(
                    "component {j} carries no responsibility; denominator clamped to {CLOSED_FORM_EPSILON}"
                ));
                b = eps;
            }
            dagger.set(j, i, (a / b).ln().max(-clamp).min(clamp));
        }
    }
    Ok((dagger, warnings))
}

/// Maximizes the EM surrogate over the weight bias `θ_C` with every other
/// parameter and the responsibilities held fixed. The objective is a
/// categorical log-likelihood with per-trial offsets, so Newton's method with
/// step halving converges quickly.
pub fn refit_weight_bias<T: Scalar>(d: &SpikeDataset<T>, p: &mut CmpParams<T>, resp: &[Vec<T>]) {
    let l = p.latent_dim();
    if l == 0 {
        return;
    }
    // The objective only sees a trial's stimulus through its offsets, so
    // responsibilities are pooled per distinct stimulus.
    let mut slots: HashMap<u64, usize> = HashMap::new();
    let mut offsets: Vec<DVector<f64>> = Vec::new();
    let mut targets: Vec<DVector<f64>> = Vec::new();
    let mut sizes: Vec<f64> = Vec::new();
    for (t, r) in d.trials().iter().zip(resp) {
        let key = t.stimulus.angle().as_f64().to_bits();
        let slot = *slots.entry(key).or_insert_with(|| {
            let view = p.view_at(t.stimulus);
            let psi0 = view.comp_psi[0].as_f64();
            offsets.push(DVector::from_iterator(l, (1..=l).map(|j| view.comp_psi[j].as_f64() - psi0)));
            targets.push(DVector::zeros(l));
            sizes.push(0.0);
            offsets.len() - 1
        });
        for (acc, v) in targets[slot].iter_mut().zip(&r[1..]) {
            *acc += v.as_f64();
        }
        sizes[slot] += 1.0;
    }
    let objective = |c: &DVector<f64>| -> f64 {
        offsets
            .iter()
            .zip(&targets)
            .zip(&sizes)
            .map(|((o, r), &m)| {
                let logits = c + o;
                r.dot(&logits) - m * crate::expfam::categorical_log_partition_raw(logits.as_slice())
            })
            .sum()
    };
    let clamp = NATURAL_CLAMP;
    let mut c = DVector::from_iterator(l, p.harmonium.bias_c.iter().map(|v| v.as_f64()));
    let mut value = objective(&c);
    for _ in 0..WEIGHT_REFIT_ITERATIONS {
        let mut g = DVector::zeros(l);
        let mut h = DMatrix::zeros(l, l);
        for ((o, r), &m) in offsets.iter().zip(&targets).zip(&sizes) {
            let logits = &c + o;
            let w = DVector::from_vec(crate::expfam::categorical_probabilities_raw(logits.as_slice())).remove_row(0);
            g += r - &w * m;
            h += (DMatrix::from_diagonal(&w) - &w * w.transpose()) * m;
        }
        for i in 0..l {
            h[(i, i)] += 1e-12;
        }
        let Some(step) = h.lu().solve(&g) else { break };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let cand = (&c + &step * t).map(|v| v.clamp(-clamp, clamp));
            let v = objective(&cand);
            if v >= value {
                moved = (&cand - &c).amax() > 1e-12;
                c = cand;
                value = v;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    for (dst, &v) in p.harmonium.bias_c.iter_mut().zip(c.iter()) {
        *dst = T::lit(v);
    }
}

/// The closed-form phase of the Hybrid algorithm.
///
/// Responsibilities are computed once for the full dataset. The count bias and
/// interaction rows are set from [`closed_form_rates`] (`θ_N ← θ†_0`,
/// `Θ_j ← θ†_j − θ†_0`), then the weight bias is refit against the same
/// responsibilities with [`refit_weight_bias`]. The link is untouched. The
/// candidate is accepted only if the conditional log-likelihood does not
/// decrease; otherwise the input parameters are returned unchanged.
pub fn hybrid_closed_form<T: Scalar>(d: &SpikeDataset<T>, p: &CmpParams<T>) -> Result<(CmpParams<T>, Vec<String>)> {
    let resp = all_responsibilities(d, p);
    let (dagger, warnings) = closed_form_rates(d, p, &resp)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let clamp = T::lit(NATURAL_CLAMP);
    let mut next = p.clone();
    next.harmonium.bias_n.copy_from_slice(dagger.row(0));
    for j in 1..p.components() {
        for i in 0..p.neurons() {
            let v = (dagger.get(j, i) - dagger.get(0, i)).max(-clamp).min(clamp);
            next.harmonium.interaction.set(j - 1, i, v);
        }
    }
    refit_weight_bias(d, &mut next, &resp);
    let before = conditional_log_likelihood(d, p)?;
    let after = conditional_log_likelihood(d, &next)?;
    if after >= before {
        Ok((next, warnings))
    } else {
        log::debug!("closed-form candidate rejected: log-likelihood {after} < {before}");
        Ok((p.clone(), warnings))
    }
}

/// Hybrid epoch: SGD on one parity of `epoch_index`, closed form on the other.
pub fn hybrid_epoch<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &mut CmpParams<T>,
    cfg: &TrainConfig,
    state: &mut DescentState<T>,
    epoch_index: usize,
) -> Result<()> {
    let closed_form = (epoch_index % 2 == 1) != cfg.hybrid_closed_form_first;
    if closed_form {
        let (next, warnings) = hybrid_closed_form(d, p)?;
        *p = next;
        state.warnings.extend(warnings);
        Ok(())
    } else {
        sgd_epoch(d, p, cfg, state)
    }
}

pub fn run_epoch<T: Scalar>(
    d: &SpikeDataset<T>,
    p: &mut CmpParams<T>,
    cfg: &TrainConfig,
    state: &mut DescentState<T>,
    epoch_index: usize,
) -> Result<()> {
    match cfg.algorithm {
        Algorithm::Sgd => sgd_epoch(d, p, cfg, state),
        Algorithm::Em => em_epoch(d, p, cfg, state),
        Algorithm::Hybrid => hybrid_epoch(d, p, cfg, state, epoch_index),
    }
}

/// Result of one descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Descent<T> {
    /// Mean negative log-likelihood before training and after each epoch.
    pub nll_trace: Vec<T>,
    pub final_params: CmpParams<T>,
    pub warnings: Vec<String>,
}

fn mean_nll<T: Scalar>(d: &SpikeDataset<T>, p: &CmpParams<T>) -> Result<T> {
    let nll = -crate::cmp::conditional_log_likelihood(d, p)?;
    if !nll.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok(nll)
}

/// Trains from the given starting point for `cfg.epochs` epochs.
pub fn descend<T: Scalar>(d: &SpikeDataset<T>, init: CmpParams<T>, cfg: &TrainConfig, seed: u64) -> Result<Descent<T>> {
    cfg.validate(d.len())?;
    let mut p = init;
    let mut state = DescentState::new(&p, seed);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    trace.push(mean_nll(d, &p)?);
    for epoch in 0..cfg.epochs {
        run_epoch(d, &mut p, cfg, &mut state, epoch)?;
        if !p.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        trace.push(mean_nll(d, &p)?);
    }
    Ok(Descent {
        nll_trace: trace,
        final_params: p,
        warnings: state.warnings,
    })
}

/// One randomly initialized descent for restart `restart`.
pub fn single_descent<T: Scalar>(d: &SpikeDataset<T>, latent_dim: usize, cfg: &TrainConfig, restart: usize) -> Result<Descent<T>> {
    let seed = derive_seed(cfg.rng_seed, restart as u64);
    let mut rng = rng_from_seed(seed);
    let (init, init_warnings) = init_params(d.neurons(), latent_dim, d, &mut rng)?;
    let mut out = descend(d, init, cfg, derive_seed(seed, 1))?;
    let mut warnings = init_warnings;
    warnings.append(&mut out.warnings);
    out.warnings = warnings;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FitReport<T> {
    pub algorithm: Algorithm,
    pub latent_dim: usize,
    pub nll_trace: Vec<T>,
    pub final_params: CmpParams<T>,
    pub restart_index: usize,
    /// Final training NLL of every restart; `None` for aborted restarts.
    pub restart_final_nll: Vec<Option<T>>,
    pub warnings: Vec<String>,
    /// Seconds spent in [`fit`]. Not serialized, so reports stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl<T: Scalar> FitReport<T> {
    pub fn final_nll(&self) -> T {
        *self.nll_trace.last().expect("trace has the initial value")
    }
}

/// Runs `cfg.restarts` independent descents and keeps the one with the lowest
/// final training NLL (ties go to the lower restart index).
pub fn fit<T: Scalar>(d: &SpikeDataset<T>, latent_dim: usize, cfg: &TrainConfig) -> Result<FitReport<T>> {
    cfg.validate(d.len())?;
    let start = Instant::now();
    let outcomes: Vec<Result<Descent<T>>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| single_descent(d, latent_dim, cfg, r))
        .collect();
    let mut best: Option<(usize, &Descent<T>)> = None;
    let mut finals = Vec::with_capacity(outcomes.len());
    let mut warnings = Vec::new();
    for (r, o) in outcomes.iter().enumerate() {
        match o {
            Ok(desc) => {
                let last = *desc.nll_trace.last().expect("nonempty trace");
                finals.push(Some(last));
                let better = match best {
                    None => true,
                    Some((_, b)) => last < *b.nll_trace.last().expect("nonempty trace"),
                };
                if better {
                    best = Some((r, desc));
                }
            }
            Err(e) => {
                let msg = format!("restart {r} aborted: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
                finals.push(None);
            }
        }
    }
    let (restart_index, desc) = best.ok_or(Error::FitFailure(cfg.restarts))?;
    warnings.extend(desc.warnings.iter().cloned());
    Ok(FitReport {
        algorithm: cfg.algorithm,
        latent_dim,
        nll_trace: desc.nll_trace.clone(),
        final_params: desc.final_params.clone(),
        restart_index,
        restart_final_nll: finals,
        warnings,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmp::{conditional_log_likelihood, Stimulus};
    use crate::expfam::CountVector;

    fn tiny_dataset() -> SpikeDataset<f64> {
        let trials = (0..12)
            .map(|i| {
                (
                    CountVector::new(vec![i % 3, (i * 7) % 5, 1 + i % 2]),
                    Stimulus::new(std::f64::consts::PI * (i % 4) as f64 / 4.0),
                )
            })
            .collect();
        SpikeDataset::new(trials).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![0.5_f64, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_first_step_is_learning_rate_times_sign() {
        let mut p = vec![0.0_f64, 0.0];
        let mut s = AdamState::new(2);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[3.0, -0.2], &mut s, &cfg).unwrap();
        assert!((p[0] - 0.005).abs() < 1e-9);
        assert!((p[1] + 0.005).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_concave_quadratic() {
        // f(x) = -(x - 1.7)², gradient -2(x - 1.7).
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut x = vec![0.0_f64];
        let mut s = AdamState::new(1);
        for _ in 0..200 {
            let g = -2.0 * (x[0] - 1.7);
            adam_step(&mut x, &[g], &mut s, &cfg).unwrap();
        }
        assert!((x[0] - 1.7).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_and_clamps() {
        let mut p = vec![29.999_f64];
        let mut s = AdamState::new(1);
        assert_eq!(
            adam_step(&mut p, &[f64::NAN], &mut s, &AdamConfig::default()),
            Err(Error::NonFiniteGradient)
        );
        let cfg = AdamConfig {
            learning_rate: 1.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert_eq!(p[0], 30.0);
    }

    #[test]
    fn init_is_deterministic_and_clamped() {
        let zeros = SpikeDataset::new(vec![(CountVector::zeros(3), Stimulus::new(0.0)); 5]).unwrap();
        let (p, warnings) = init_params(3, 2, &zeros, &mut rng_from_seed(1)).unwrap();
        assert!(p.harmonium.bias_n.iter().all(|&b| (b - MIN_INIT_RATE.ln()).abs() < 1e-15));
        assert_eq!(warnings.len(), 3);
        assert!(p.harmonium.bias_c.iter().all(|&b| b == 0.0));
        let (q, _) = init_params(3, 2, &zeros, &mut rng_from_seed(1)).unwrap();
        assert_eq!(p, q);
        assert!(init_params(4, 2, &zeros, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn minibatch_partition_counts() {
        let mut rng = rng_from_seed(0);
        let b = minibatches(496, 50, &mut rng);
        assert_eq!(b.len(), 10);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..496).collect::<Vec<_>>());
        assert_eq!(minibatches(12, 12, &mut rng).len(), 1);
    }

    #[test]
    fn full_batch_sgd_is_one_adam_step() {
        let d = tiny_dataset();
        let cfg = TrainConfig {
            minibatch_size: d.len(),
            algorithm: Algorithm::Sgd,
            ..TrainConfig::default()
        };
        let (p0, _) = init_params(3, 1, &d, &mut rng_from_seed(4)).unwrap();
        let mut p = p0.clone();
        let mut state = DescentState::new(&p, 9);
        sgd_epoch(&d, &mut p, &cfg, &mut state).unwrap();
        assert_eq!(state.adam.step_count, 1);
        let all: Vec<usize> = (0..d.len()).collect();
        let g = mean_ll_gradient(&d, &p0, &all);
        let mut expected = p0.clone();
        adam_update(&mut expected, &g, &mut AdamState::new(p0.len()), &cfg.adam()).unwrap();
        for (a, b) in p.to_flat().iter().zip(expected.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn em_surrogate_gradient_is_tangent_at_epoch_start() {
        let d = tiny_dataset();
        let (p, _) = init_params(3, 2, &d, &mut rng_from_seed(2)).unwrap();
        let frozen = all_responsibilities(&d, &p);
        let all: Vec<usize> = (0..d.len()).collect();
        let a = mean_ll_gradient(&d, &p, &all).to_flat();
        let b = mean_surrogate_gradient(&d, &p, &frozen, &all).to_flat();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn closed_form_single_component_is_poisson_mle() {
        let d = tiny_dataset();
        let p = CmpParams::<f64>::zeros(3, 0);
        let (next, _) = hybrid_closed_form(&d, &p).unwrap();
        for k in 0..3 {
            let mean = d.trials().iter().map(|t| f64::from(t.counts.0[k])).sum::<f64>() / d.len() as f64;
            assert!((next.harmonium.bias_n[k] - mean.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_clamps_silent_neuron() {
        let trials = vec![(CountVector::new(vec![0, 3]), Stimulus::new(0.0)); 4];
        let d = SpikeDataset::new(trials).unwrap();
        let (next, warnings) = hybrid_closed_form(&d, &CmpParams::zeros(2, 1)).unwrap();
        assert!(!warnings.is_empty());
        assert!(next.is_finite());
    }

    #[test]
    fn hybrid_phase_order() {
        let d = tiny_dataset();
        let cfg = TrainConfig {
            algorithm: Algorithm::Hybrid,
            minibatch_size: 4,
            ..TrainConfig::default()
        };
        let (p0, _) = init_params(3, 1, &d, &mut rng_from_seed(3)).unwrap();
        let mut p = p0.clone();
        let mut state = DescentState::new(&p, 1);
        hybrid_epoch(&d, &mut p, &cfg, &mut state, 0).unwrap();
        assert_eq!(state.adam.step_count, 3);
        let after_sgd = p.clone();
        hybrid_epoch(&d, &mut p, &cfg, &mut state, 1).unwrap();
        let (closed, _) = hybrid_closed_form(&d, &after_sgd).unwrap();
        assert_eq!(p, closed);
    }

    #[test]
    fn fit_is_deterministic_and_traces_include_start() {
        let d = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 5,
            minibatch_size: 4,
            restarts: 3,
            rng_seed: 42,
            ..TrainConfig::default()
        };
        let a = fit(&d, 1, &cfg).unwrap();
        let b = fit(&d, 1, &cfg).unwrap();
        assert_eq!(a.nll_trace.len(), 6);
        assert_eq!(a.nll_trace, b.nll_trace);
        assert_eq!(a.final_params, b.final_params);
        let best = a.restart_final_nll.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.final_nll(), best);
        let nll = -conditional_log_likelihood(&d, &a.final_params).unwrap();
        assert!((nll - a.final_nll()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            minibatch_size: 100,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(50), Err(Error::Config(_))));
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate(100).is_err());
        assert!("bogus".parse::<Algorithm>().is_err());
        assert_eq!("Hybrid".parse::<Algorithm>().unwrap(), Algorithm::Hybrid);
    }
}
