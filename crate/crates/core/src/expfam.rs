//! Categorical and independent-Poisson exponential families.
//!
//! Both families are handled in closed form. The categorical family over
//! outcomes `0..=m_C` carries `m_C` natural parameters; outcome 0 has an
//! implicit natural parameter of zero and an implicit mean `1 - Σ η`.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Categorical over `m_C + 1` outcomes, `m_C` parameters.
    Categorical(usize),
    /// `m_N` independent Poisson counts.
    Poisson(usize),
}

impl Family {
    pub fn dim(self) -> usize {
        match self {
            Family::Categorical(d) | Family::Poisson(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NaturalParams<T> {
    values: Vec<T>,
    family: Family,
}

impl<T: Scalar> NaturalParams<T> {
    fn new(values: Vec<T>, family: Family) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "natural parameter {i} is not finite"
            )));
        }
        Ok(Self { values, family })
    }

    pub fn categorical(values: Vec<T>) -> Result<Self> {
        let d = values.len();
        Self::new(values, Family::Categorical(d))
    }

    pub fn poisson(values: Vec<T>) -> Result<Self> {
        let d = values.len();
        Self::new(values, Family::Poisson(d))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MeanParams<T> {
    values: Vec<T>,
    family: Family,
}

impl<T: Scalar> MeanParams<T> {
    /// Poisson rates; every entry must be finite and strictly positive.
    pub fn poisson(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v > T::zero())) {
            return Err(Error::OutOfDomain(format!("Poisson rate {i} is not positive")));
        }
        let d = values.len();
        Ok(Self {
            values,
            family: Family::Poisson(d),
        })
    }

    /// Categorical probabilities of outcomes `1..=m_C`; outcome 0 gets `1 - Σ`.
    pub fn categorical(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values
            .iter()
            .position(|v| !(v.is_finite() && *v > T::zero() && *v < T::one()))
        {
            return Err(Error::OutOfDomain(format!(
                "categorical mean {i} is not in (0, 1)"
            )));
        }
        let total: T = values.iter().copied().sum();
        if total >= T::one() {
            return Err(Error::OutOfDomain(
                "categorical means sum to 1 or more; outcome 0 has no mass".into(),
            ));
        }
        let d = values.len();
        Ok(Self {
            values,
            family: Family::Categorical(d),
        })
    }

    /// Categorical means without interior checks. Posteriors can underflow to
    /// the boundary, so they are built through this path.
    pub(crate) fn categorical_unchecked(values: Vec<T>) -> Self {
        let d = values.len();
        Self {
            values,
            family: Family::Categorical(d),
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// For a categorical mean, all `m_C + 1` outcome probabilities.
    pub fn full_probabilities(&self) -> Vec<T> {
        match self.family {
            Family::Categorical(_) => {
                let rest: T = self.values.iter().copied().sum();
                let mut out = Vec::with_capacity(self.values.len() + 1);
                out.push(T::one() - rest);
                out.extend_from_slice(&self.values);
                out
            }
            Family::Poisson(_) => self.values.clone(),
        }
    }
}

/// A vector of spike counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CountVector(pub Vec<u32>);

impl CountVector {
    pub fn new(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.0.iter().map(|&n| T::from_count(n)).collect()
    }

    /// `log μ_N({n}) = -Σ_k log(n_k!)`.
    pub fn log_base_measure(&self) -> f64 {
        -self.0.iter().map(|&n| log_factorial(n)).sum::<f64>()
    }
}

impl From<Vec<u32>> for CountVector {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

pub fn log_factorial(n: u32) -> f64 {
    if n < 2 {
        0.0
    } else {
        statrs::function::gamma::ln_gamma(f64::from(n) + 1.0)
    }
}

fn expect_family<T: Scalar>(theta: &NaturalParams<T>, categorical: bool) -> Result<()> {
    match (theta.family, categorical) {
        (Family::Categorical(_), true) | (Family::Poisson(_), false) => Ok(()),
        (f, _) => Err(Error::InvalidParameter(format!(
            "operation not defined for family {f:?}"
        ))),
    }
}

/// `log(1 + Σ_j exp θ_j)` on a raw slice.
pub fn categorical_log_partition_raw<T: Scalar>(theta: &[T]) -> T {
    let max = theta.iter().copied().fold(T::zero(), T::max);
    let total: T = theta.iter().map(|&t| (t - max).exp()).sum::<T>() + (-max).exp();
    max + total.ln()
}

/// `Σ_k exp θ_k` on a raw slice.
pub fn poisson_log_partition_raw<T: Scalar>(theta: &[T]) -> T {
    theta.iter().map(|t| t.exp()).sum()
}

/// Probabilities of all `m_C + 1` outcomes from a raw categorical natural
/// parameter vector.
pub fn categorical_probabilities_raw<T: Scalar>(theta: &[T]) -> Vec<T> {
    let mut full = Vec::with_capacity(theta.len() + 1);
    full.push(T::zero());
    full.extend_from_slice(theta);
    let lse = log_sum_exp(&full);
    full.iter_mut().for_each(|x| *x = (*x - lse).exp());
    full
}

pub fn categorical_log_partition<T: Scalar>(theta: &NaturalParams<T>) -> Result<T> {
    expect_family(theta, true)?;
    Ok(categorical_log_partition_raw(&theta.values))
}

pub fn poisson_log_partition<T: Scalar>(theta: &NaturalParams<T>) -> Result<T> {
    expect_family(theta, false)?;
    Ok(poisson_log_partition_raw(&theta.values))
}

/// The mean-parameter map τ (gradient of the log-partition).
pub fn to_mean<T: Scalar>(theta: &NaturalParams<T>) -> MeanParams<T> {
    match theta.family {
        Family::Categorical(_) => {
            let full = categorical_probabilities_raw(&theta.values);
            MeanParams::categorical_unchecked(full[1..].to_vec())
        }
        Family::Poisson(d) => MeanParams {
            values: theta.values.iter().map(|t| t.exp()).collect(),
            family: Family::Poisson(d),
        },
    }
}

/// The inverse mean-parameter map τ⁻¹, in closed form per family.
pub fn to_natural<T: Scalar>(eta: &MeanParams<T>) -> Result<NaturalParams<T>> {
    match eta.family {
        Family::Categorical(_) => {
            let rest = T::one() - eta.values.iter().copied().sum::<T>();
            if !(rest > T::zero()) || eta.values.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::OutOfDomain(
                    "categorical mean on the simplex boundary".into(),
                ));
            }
            let log_rest = rest.ln();
            NaturalParams::categorical(eta.values.iter().map(|&v| v.ln() - log_rest).collect())
        }
        Family::Poisson(_) => {
            if eta.values.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::OutOfDomain("Poisson rate is not positive".into()));
            }
            NaturalParams::poisson(eta.values.iter().map(|v| v.ln()).collect())
        }
    }
}

/// `n·θ + log μ_N({n}) - ψ_N(θ)` on raw inputs.
/// `n · θ` for a count vector.
pub(crate) fn dot_counts<T: Scalar>(counts: &[u32], theta: &[T]) -> T {
    counts
        .iter()
        .zip(theta)
        .fold(T::zero(), |acc, (&n, &t)| acc + T::from_count(n) * t)
}

pub fn poisson_log_density_raw<T: Scalar>(counts: &[u32], theta: &[T], log_base: T) -> T {
    let mut acc = log_base;
    for (&n, &t) in counts.iter().zip(theta) {
        acc = acc + T::from_count(n) * t - t.exp();
    }
    acc
}

pub fn poisson_log_density<T: Scalar>(n: &CountVector, theta: &NaturalParams<T>) -> Result<T> {
    expect_family(theta, false)?;
    if n.len() != theta.len() {
        return Err(Error::Shape(format!(
            "count vector has {} entries, parameters have {}",
            n.len(),
            theta.len()
        )));
    }
    Ok(poisson_log_density_raw(
        n.as_slice(),
        &theta.values,
        T::lit(n.log_base_measure()),
    ))
}

pub fn categorical_log_density<T: Scalar>(j: usize, theta: &NaturalParams<T>) -> Result<T> {
    expect_family(theta, true)?;
    if j > theta.len() {
        return Err(Error::Index {
            index: j,
            len: theta.len() + 1,
        });
    }
    let psi = categorical_log_partition_raw(&theta.values);
    let t = if j == 0 { T::zero() } else { theta.values[j - 1] };
    Ok(t - psi)
}

pub fn sample_poisson<T: Scalar>(rates: &MeanParams<T>, rng: &mut Rng) -> Result<CountVector> {
    if !matches!(rates.family, Family::Poisson(_)) {
        return Err(Error::InvalidParameter("expected Poisson rates".into()));
    }
    Ok(sample_poisson_raw(&rates.values, rng))
}

pub(crate) fn sample_poisson_raw<T: Scalar>(rates: &[T], rng: &mut Rng) -> CountVector {
    CountVector(
        rates
            .iter()
            .map(|&r| {
                let lambda = r.as_f64();
                let draw: f64 = Poisson::new(lambda)
                    .expect("validated positive rate")
                    .sample(rng);
                draw as u32
            })
            .collect(),
    )
}

pub fn sample_categorical<T: Scalar>(weights: &MeanParams<T>, rng: &mut Rng) -> Result<usize> {
    if !matches!(weights.family, Family::Categorical(_)) {
        return Err(Error::InvalidParameter("expected categorical weights".into()));
    }
    Ok(sample_index(&weights.full_probabilities(), rng))
}

/// Inverse-CDF draw from a full probability vector.
pub(crate) fn sample_index<T: Scalar>(probs: &[T], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;

    fn cat(v: Vec<f64>) -> NaturalParams<f64> {
        NaturalParams::categorical(v).unwrap()
    }

    fn poi(v: Vec<f64>) -> NaturalParams<f64> {
        NaturalParams::poisson(v).unwrap()
    }

    #[test]
    fn categorical_log_partition_examples() {
        assert!((categorical_log_partition(&cat(vec![0.0, 0.0])).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert_eq!(categorical_log_partition(&cat(vec![])).unwrap(), 0.0);
        // log(1 + e^1000) = 1000 + log(1 + e^-1000) = 1000 to double precision.
        let big = categorical_log_partition(&cat(vec![1000.0])).unwrap();
        assert!(big.is_finite());
        assert!((big - 1000.0).abs() < 1e-12);
        let mixed = categorical_log_partition(&cat(vec![1000.0, 999.0])).unwrap();
        assert!((mixed - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        assert!(matches!(
            NaturalParams::categorical(vec![f64::NAN]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(NaturalParams::poisson(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn family_mismatch_rejected() {
        assert!(poisson_log_partition(&cat(vec![0.0])).is_err());
        assert!(categorical_log_density(0, &poi(vec![0.0])).is_err());
    }

    #[test]
    fn poisson_log_partition_examples() {
        assert_eq!(poisson_log_partition(&poi(vec![0.0; 3])).unwrap(), 3.0);
        let v = poisson_log_partition(&poi(vec![2f64.ln(), 5f64.ln()])).unwrap();
        assert!((v - 7.0).abs() < 1e-14);
    }

    #[test]
    fn poisson_log_partition_matches_truncated_series() {
        // ψ_N(θ) = Σ_k log Σ_n e^{θ_k n}/n!; truncated at n ≤ 60.
        let theta = [0.3_f64, -1.2, 1.6];
        let series: f64 = theta
            .iter()
            .map(|&t| {
                (0..=60u32)
                    .map(|n| (t * f64::from(n) - log_factorial(n)).exp())
                    .sum::<f64>()
                    .ln()
            })
            .sum();
        let closed = poisson_log_partition(&poi(theta.to_vec())).unwrap();
        assert!((series - closed).abs() < 1e-10);
    }

    #[test]
    fn mean_map_examples() {
        let m = to_mean(&cat(vec![0.0, 0.0]));
        assert!(m.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let m = to_mean(&poi(vec![0.0, 2f64.ln()]));
        assert!((m.values()[0] - 1.0).abs() < 1e-15 && (m.values()[1] - 2.0).abs() < 1e-14);
        let m = to_mean(&cat(vec![2f64.ln()]));
        assert!((m.values()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_mean_map_examples() {
        let t = to_natural(&MeanParams::<f64>::categorical(vec![1.0 / 3.0, 1.0 / 3.0]).unwrap()).unwrap();
        assert!(t.values().iter().all(|v| v.abs() < 1e-14));
        let t = to_natural(&MeanParams::<f64>::poisson(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(t.values()[0].abs() < 1e-15 && (t.values()[1] - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            MeanParams::categorical(vec![0.5, 0.5]),
            Err(Error::OutOfDomain(_))
        ));
        assert!(MeanParams::<f64>::poisson(vec![0.0]).is_err());
        // Boundary means that slipped past construction still fail.
        let boundary = MeanParams::categorical_unchecked(vec![0.5, 0.5]);
        assert!(matches!(to_natural(&boundary), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn poisson_density_examples() {
        let theta = poi(vec![0.4, -0.3]);
        let psi = poisson_log_partition(&theta).unwrap();
        let d = poisson_log_density(&CountVector::zeros(2), &theta).unwrap();
        assert!((d + psi).abs() < 1e-15);
        let d = poisson_log_density(&CountVector::new(vec![1]), &poi(vec![0.0])).unwrap();
        assert!((d + 1.0).abs() < 1e-15);
        assert!(poisson_log_density(&CountVector::zeros(3), &theta).is_err());
    }

    #[test]
    fn poisson_density_normalizes_by_truncation() {
        let theta = poi(vec![5f64.ln(), 0.7f64.ln()]);
        let mut total = 0.0;
        for a in 0..=60 {
            for b in 0..=60 {
                total += poisson_log_density(&CountVector::new(vec![a, b]), &theta)
                    .unwrap()
                    .exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn categorical_density_examples() {
        let d = categorical_log_density(0, &cat(vec![0.0, 0.0])).unwrap();
        assert!((d - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        let d = categorical_log_density(1, &cat(vec![2f64.ln()])).unwrap();
        assert!((d - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!(matches!(
            categorical_log_density(3, &cat(vec![0.0, 0.0])),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn log_factorial_handles_large_counts() {
        let direct: f64 = (1..=150u32).map(|k| f64::from(k).ln()).sum();
        assert!((log_factorial(150) - direct).abs() < 1e-9);
        assert_eq!(log_factorial(0), 0.0);
    }

    #[test]
    fn poisson_sampling_mean() {
        let mut rng = rng_from_seed(11);
        let rates = MeanParams::poisson(vec![3.0_f64]).unwrap();
        let n = 100_000;
        let mean = (0..n)
            .map(|_| f64::from(sample_poisson(&rates, &mut rng).unwrap().0[0]))
            .sum::<f64>()
            / f64::from(n);
        // SE = sqrt(3 / 1e5) ≈ 0.0055.
        assert!((mean - 3.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn tiny_rate_gives_zero_counts() {
        let mut rng = rng_from_seed(3);
        let rates = MeanParams::poisson(vec![1e-12_f64; 4]).unwrap();
        for _ in 0..1000 {
            assert!(sample_poisson(&rates, &mut rng).unwrap().0.iter().all(|&n| n == 0));
        }
    }

    #[test]
    fn categorical_sampling_concentrates() {
        let mut rng = rng_from_seed(5);
        let w = MeanParams::categorical(vec![1.0 - 1e-9, 5e-10]).unwrap();
        let hits = (0..1000)
            .filter(|_| sample_categorical(&w, &mut rng).unwrap() == 1)
            .count();
        assert!(hits >= 999);
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let mut rng = rng_from_seed(9);
        let w = MeanParams::categorical(vec![0.2_f64, 0.5]).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_categorical(&w, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip([0.3, 0.2, 0.5]) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let rates = MeanParams::poisson(vec![2.0_f64, 4.0]).unwrap();
        let a: Vec<_> = {
            let mut r = rng_from_seed(1);
            (0..10).map(|_| sample_poisson(&rates, &mut r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = rng_from_seed(1);
            (0..10).map(|_| sample_poisson(&rates, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-5;
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn mean_natural_round_trip(theta in proptest::collection::vec(-5.0f64..5.0, 0..6)) {
            let c = cat(theta.clone());
            let back = to_natural(&to_mean(&c)).unwrap();
            for (a, b) in back.values().iter().zip(&theta) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let p = poi(theta.clone());
            let back = to_natural(&to_mean(&p)).unwrap();
            for (a, b) in back.values().iter().zip(&theta) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn log_partitions_are_convex(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let c = |v: &[f64]| categorical_log_partition_raw(v);
            prop_assert!(c(&mid) <= 0.5 * (c(&a) + c(&b)) + 1e-12);
            let p = |v: &[f64]| poisson_log_partition_raw(v);
            prop_assert!(p(&mid) <= 0.5 * (p(&a) + p(&b)) + 1e-12);
        }

        #[test]
        fn mean_map_is_gradient_of_log_partition(theta in proptest::collection::vec(-3.0f64..3.0, 1..5)) {
            let c_mean = to_mean(&cat(theta.clone()));
            let p_mean = to_mean(&poi(theta.clone()));
            for i in 0..theta.len() {
                let gc = central_diff(categorical_log_partition_raw, &theta, i);
                prop_assert!((gc - c_mean.values()[i]).abs() <= 1e-5 * c_mean.values()[i].abs().max(1e-3));
                let gp = central_diff(poisson_log_partition_raw, &theta, i);
                prop_assert!((gp - p_mean.values()[i]).abs() <= 1e-5 * p_mean.values()[i].abs());
            }
        }

        #[test]
        fn categorical_density_normalizes(theta in proptest::collection::vec(-10.0f64..10.0, 0..6)) {
            let t = cat(theta.clone());
            let total: f64 = (0..=theta.len()).map(|j| categorical_log_density(j, &t).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
