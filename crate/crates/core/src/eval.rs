//! Likelihood bounds, cross-validated model selection and empirical
//! noise correlations.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmp::{
    conditional_log_likelihood, covariance_to_correlation, encode_stimulus, CmpParams, SpikeDataset, Stimulus,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{Scalar, NATURAL_CLAMP};
use crate::seed::{derive_seed, rng_from_seed};
use crate::training::{fit, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneComponentConfig {
    pub max_iterations: usize,
    /// Stop once the mean-log-likelihood gradient norm falls below this.
    pub gradient_tolerance: f64,
    /// Seeds a small random perturbation of the starting point.
    pub rng_seed: u64,
}

impl Default for OneComponentConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OneComponentFit<T> {
    pub params: CmpParams<T>,
    /// Mean negative conditional log-likelihood per trial.
    pub nll: T,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Maximum-likelihood fit of the single-component model.
///
/// With one component every neuron is an independent Poisson regression on
/// the stimulus features, so each neuron is solved separately by damped
/// Newton iterations on the concave per-neuron log-likelihood.
pub fn one_component_fit<T: Scalar>(d: &SpikeDataset<T>, cfg: &OneComponentConfig) -> Result<OneComponentFit<T>> {
    let m_s = d.len() as f64;
    let features: Vec<Vector3<f64>> = d
        .trials()
        .iter()
        .map(|t| {
            let s = encode_stimulus(t.stimulus);
            Vector3::new(1.0, s[0].as_f64(), s[1].as_f64())
        })
        .collect();
    let mut rng = rng_from_seed(cfg.rng_seed);
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    let mut p = CmpParams::<T>::zeros(d.neurons(), 0);
    let mut warnings = Vec::new();
    let mut converged = true;
    for k in 0..d.neurons() {
        let counts: Vec<f64> = d.trials().iter().map(|t| f64::from(t.counts.0[k])).collect();
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            let msg = format!("neuron {k} never fires; bias clamped to -{NATURAL_CLAMP}");
            log::warn!("{msg}");
            warnings.push(msg);
            p.harmonium.bias_n[k] = T::lit(-NATURAL_CLAMP);
            continue;
        }
        let objective = |beta: &Vector3<f64>| -> f64 {
            features
                .iter()
                .zip(&counts)
                .map(|(x, &n)| {
                    let eta = x.dot(beta);
                    n * eta - eta.exp()
                })
                .sum::<f64>()
                / m_s
        };
        let mut beta = Vector3::new(
            (total / m_s).ln() + jitter.sample(&mut rng),
            jitter.sample(&mut rng),
            jitter.sample(&mut rng),
        );
        let mut value = objective(&beta);
        let mut done = false;
        for _ in 0..cfg.max_iterations {
            let mut g = Vector3::zeros();
            let mut h = Matrix3::zeros();
            for (x, &n) in features.iter().zip(&counts) {
                let mu = x.dot(&beta).exp();
                g += x * ((n - mu) / m_s);
                h += x * x.transpose() * (mu / m_s);
            }
            if g.norm() < cfg.gradient_tolerance {
                done = true;
                break;
            }
            let Some(step) = h.lu().solve(&g) else { break };
            let mut t = 1.0;
            loop {
                let cand = beta + step * t;
                let v = objective(&cand);
                if v >= value || t < 1e-10 {
                    beta = cand;
                    value = v;
                    break;
                }
                t *= 0.5;
            }
        }
        if !done {
            converged = false;
            let msg = format!("one-component fit for neuron {k} did not reach the gradient tolerance");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let clamp = NATURAL_CLAMP;
        p.harmonium.bias_n[k] = T::lit(beta[0].clamp(-clamp, clamp));
        p.link.set(k, 0, T::lit(beta[1].clamp(-clamp, clamp)));
        p.link.set(k, 1, T::lit(beta[2].clamp(-clamp, clamp)));
    }
    let nll = -conditional_log_likelihood(d, &p)?;
    Ok(OneComponentFit {
        params: p,
        nll,
        converged,
        warnings,
    })
}

/// Mean negative conditional log-likelihood of data under the generating model.
pub fn ground_truth_nll<T: Scalar>(d: &SpikeDataset<T>, truth: &CmpParams<T>) -> Result<T> {
    Ok(-conditional_log_likelihood(d, truth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub upper_bound_nll: f64,
    pub lower_bound_nll: Option<f64>,
}

pub fn bounds<T: Scalar>(d: &SpikeDataset<T>, truth: Option<&CmpParams<T>>) -> Result<BoundsReport> {
    let upper = one_component_fit(d, &OneComponentConfig::default())?.nll.as_f64();
    let lower = truth.map(|t| ground_truth_nll(d, t)).transpose()?.map(Scalar::as_f64);
    Ok(BoundsReport {
        upper_bound_nll: upper,
        lower_bound_nll: lower,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub rng_seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Numbers of mixture components evaluated.
    pub component_grid: Vec<usize>,
    pub folds: usize,
    /// `held_out[fold][g]`: mean held-out log-likelihood per trial; `None`
    /// when that fit failed.
    pub held_out: Vec<Vec<Option<f64>>>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    /// `mean[g] - mean[1 component]`, nats per trial.
    pub relative_gain: Vec<f64>,
    pub selected_components: usize,
    pub warnings: Vec<String>,
}

/// Assigns each trial to a fold. Trials are grouped by stimulus, ordered by
/// content and shuffled per group with a derived seed, so the assignment does
/// not depend on the order of trials in the dataset.
pub fn stratified_folds<T: Scalar>(d: &SpikeDataset<T>, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let stimuli = d.distinct_stimuli();
    let mut assignment = vec![0usize; d.len()];
    let mut offset = 0usize;
    for (g, z) in stimuli.iter().enumerate() {
        let mut members: Vec<usize> = (0..d.len()).filter(|&i| d.trials()[i].stimulus == *z).collect();
        if members.len() < folds {
            return Err(Error::Config(format!(
                "stimulus {} has {} trials, fewer than {folds} folds",
                z.angle(),
                members.len()
            )));
        }
        members.sort_by(|&a, &b| d.trials()[a].counts.cmp(&d.trials()[b].counts));
        members.shuffle(&mut rng_from_seed(derive_seed(seed, g as u64)));
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = (offset + pos) % folds;
        }
        offset += members.len();
    }
    Ok(assignment)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// K-fold cross-validation of the held-out log-likelihood over numbers of
/// components. Multi-component cells use the full multi-restart trainer in
/// `cfg`; the 1-component cell uses the exact convex fit.
pub fn kfold_cv<T: Scalar>(
    d: &SpikeDataset<T>,
    component_grid: &[usize],
    cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<CvReport> {
    if component_grid.is_empty() {
        return Err(Error::Config("component grid is empty".into()));
    }
    if component_grid.contains(&0) {
        return Err(Error::Config("component counts start at 1".into()));
    }
    let base = component_grid
        .iter()
        .position(|&c| c == 1)
        .ok_or_else(|| Error::Config("component grid must include 1".into()))?;
    let assignment = stratified_folds(d, cv.folds, cv.rng_seed)?;
    let splits: Vec<(SpikeDataset<T>, SpikeDataset<T>)> = (0..cv.folds)
        .map(|f| {
            let train: Vec<usize> = (0..d.len()).filter(|&i| assignment[i] != f).collect();
            let test: Vec<usize> = (0..d.len()).filter(|&i| assignment[i] == f).collect();
            Ok((d.subset(&train)?, d.subset(&test)?))
        })
        .collect::<Result<_>>()?;
    for (train, _) in &splits {
        cfg.validate(train.len())?;
    }
    let cells: Vec<(usize, usize)> = (0..cv.folds)
        .flat_map(|f| (0..component_grid.len()).map(move |g| (f, g)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(f, g)| {
            let (train, test) = &splits[f];
            let components = component_grid[g];
            let params = if components == 1 {
                let one = OneComponentConfig {
                    rng_seed: derive_seed(cv.rng_seed, f as u64),
                    ..OneComponentConfig::default()
                };
                one_component_fit(train, &one)?.params
            } else {
                let cell_cfg = TrainConfig {
                    rng_seed: derive_seed(derive_seed(cfg.rng_seed, f as u64), components as u64),
                    ..cfg.clone()
                };
                fit(train, components - 1, &cell_cfg)?.final_params
            };
            Ok(conditional_log_likelihood(test, &params)?.as_f64())
        })
        .collect();
    let mut held_out = vec![vec![None; component_grid.len()]; cv.folds];
    let mut warnings = Vec::new();
    for (&(f, g), r) in cells.iter().zip(results) {
        match r {
            Ok(v) if v.is_finite() => held_out[f][g] = Some(v),
            Ok(_) => warnings.push(format!("fold {f}, {} components: non-finite held-out likelihood", component_grid[g])),
            Err(e) => warnings.push(format!("fold {f}, {} components: {e}", component_grid[g])),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut mean = Vec::with_capacity(component_grid.len());
    let mut std_error = Vec::with_capacity(component_grid.len());
    for g in 0..component_grid.len() {
        let vals: Vec<f64> = held_out.iter().filter_map(|row| row[g]).collect();
        let (m, se) = mean_and_se(&vals);
        mean.push(m);
        std_error.push(se);
    }
    let relative_gain = mean.iter().map(|m| m - mean[base]).collect();
    let mut report = CvReport {
        component_grid: component_grid.to_vec(),
        folds: cv.folds,
        held_out,
        mean,
        std_error,
        relative_gain,
        selected_components: 1,
        warnings,
    };
    report.selected_components = select_components(&report);
    Ok(report)
}

/// Means closer than this are treated as tied.
pub const SELECTION_TIE_TOLERANCE: f64 = 1e-12;

/// Component count with the highest mean held-out log-likelihood; ties go to
/// fewer components.
pub fn select_components(r: &CvReport) -> usize {
    let mut order: Vec<usize> = (0..r.component_grid.len()).collect();
    order.sort_by_key(|&g| r.component_grid[g]);
    let mut best: Option<usize> = None;
    for g in order {
        if !r.mean[g].is_finite() {
            continue;
        }
        match best {
            None => best = Some(g),
            Some(b) if r.mean[g] > r.mean[b] + SELECTION_TIE_TOLERANCE => best = Some(g),
            _ => {}
        }
    }
    best.map_or(1, |g| r.component_grid[g])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StimulusCorrelation<T> {
    pub stimulus: Stimulus<T>,
    pub trials: usize,
    pub correlation: Matrix<T>,
    /// Zero-variance neurons at this stimulus.
    pub undefined: Vec<usize>,
}

/// Pearson correlation matrices of the counts at each distinct stimulus.
pub fn empirical_correlations<T: Scalar>(d: &SpikeDataset<T>) -> Result<Vec<StimulusCorrelation<T>>> {
    let m = d.neurons();
    d.distinct_stimuli()
        .into_iter()
        .map(|z| {
            let rows: Vec<Vec<f64>> = d
                .trials()
                .iter()
                .filter(|t| t.stimulus == z)
                .map(|t| t.counts.as_slice().iter().map(|&c| f64::from(c)).collect())
                .collect();
            if rows.len() < 2 {
                return Err(Error::InvalidParameter(format!(
                    "stimulus {} has fewer than 2 trials",
                    z.angle()
                )));
            }
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..m).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
            let mut cov = Matrix::<f64>::zeros(m, m);
            for a in 0..m {
                for b in a..m {
                    let s = rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0);
                    cov.set(a, b, s);
                    cov.set(b, a, s);
                }
            }
            let (corr, undefined) = covariance_to_correlation(&cov);
            if !undefined.is_empty() {
                log::warn!(
                    "zero variance for neurons {undefined:?} at z = {}; correlations set to 0",
                    z.angle()
                );
            }
            Ok(StimulusCorrelation {
                stimulus: z,
                trials: rows.len(),
                correlation: corr.map(T::lit),
                undefined,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::CountVector;
    use std::f64::consts::PI;

    fn report(grid: Vec<usize>, mean: Vec<f64>) -> CvReport {
        CvReport {
            relative_gain: mean.iter().map(|m| m - mean[0]).collect(),
            std_error: vec![0.0; mean.len()],
            held_out: vec![],
            folds: 10,
            selected_components: 0,
            warnings: vec![],
            component_grid: grid,
            mean,
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_components(&report(vec![1, 2, 3], vec![-1.0, -1.1, -1.2])), 1);
        assert_eq!(select_components(&report(vec![1, 2, 3], vec![-1.0, -0.9, -1.2])), 2);
        assert_eq!(select_components(&report(vec![1, 2, 3], vec![-1.0, -1.0 + 1e-13, -1.0])), 1);
        assert_eq!(select_components(&report(vec![3, 1, 2], vec![-0.5, -0.5, -0.5])), 1);
    }

    #[test]
    fn correlations_of_identical_trials_are_flagged() {
        let trials = vec![(CountVector::new(vec![2, 3]), Stimulus::new(0.0)); 4];
        let d = SpikeDataset::new(trials).unwrap();
        let c = empirical_correlations(&d).unwrap();
        assert_eq!(c[0].undefined, vec![0, 1]);
        assert_eq!(c[0].correlation.get(0, 1), 0.0);
        assert_eq!(c[0].correlation.get(1, 1), 1.0);
    }

    #[test]
    fn perfectly_correlated_pair() {
        let trials = (0..6)
            .map(|i| (CountVector::new(vec![i, i, 5 - i / 2]), Stimulus::new(PI / 3.0)))
            .collect();
        let d = SpikeDataset::new(trials).unwrap();
        let c = empirical_correlations(&d).unwrap();
        assert!((c[0].correlation.get(0, 1) - 1.0).abs() < 1e-12);
        let single = SpikeDataset::new(vec![(CountVector::new(vec![1]), Stimulus::new(0.0))]).unwrap();
        assert!(empirical_correlations(&single).is_err());
    }

    #[test]
    fn folds_are_stratified_and_order_invariant() {
        let trials: Vec<(CountVector, Stimulus<f64>)> = (0..40)
            .map(|i| (CountVector::new(vec![i % 7, i % 3]), Stimulus::new(PI * (i % 4) as f64 / 4.0)))
            .collect();
        let d = SpikeDataset::new(trials.clone()).unwrap();
        let folds = stratified_folds(&d, 5, 3).unwrap();
        for f in 0..5 {
            for z in d.distinct_stimuli() {
                let n = (0..40).filter(|&i| folds[i] == f && d.trials()[i].stimulus == z).count();
                assert_eq!(n, 2);
            }
        }
        let mut reversed = trials.clone();
        reversed.reverse();
        let r = SpikeDataset::new(reversed.clone()).unwrap();
        let rf = stratified_folds(&r, 5, 3).unwrap();
        let contents = |ts: &[(CountVector, Stimulus<f64>)], fs: &[usize]| {
            let mut v: Vec<Vec<(Vec<u32>, u64)>> = vec![vec![]; 5];
            for ((n, z), &f) in ts.iter().zip(fs) {
                v[f].push((n.0.clone(), z.angle().to_bits()));
            }
            v.iter_mut().for_each(|x| x.sort());
            v
        };
        assert_eq!(contents(&trials, &folds), contents(&reversed, &rf));
        assert!(stratified_folds(&d, 11, 0).is_err());
        assert!(stratified_folds(&d, 1, 0).is_err());
    }

    #[test]
    fn cv_grid_must_include_one() {
        let trials: Vec<(CountVector, Stimulus<f64>)> =
            (0..20).map(|i| (CountVector::new(vec![i % 4]), Stimulus::new(0.0))).collect();
        let d = SpikeDataset::new(trials).unwrap();
        let cfg = TrainConfig { minibatch_size: 5, ..TrainConfig::default() };
        assert!(kfold_cv(&d, &[2, 3], &cfg, &CvConfig { folds: 2, rng_seed: 0 }).is_err());
        assert!(kfold_cv(&d, &[], &cfg, &CvConfig::default()).is_err());
    }
}
