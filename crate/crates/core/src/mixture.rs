//! Poisson mixtures in harmonium form.
//!
//! A harmonium over counts and a categorical latent is exactly a finite
//! mixture of independent-Poisson components. Component `j` has natural
//! parameters `θ_N + Θ_j` (with `Θ_0 = 0`), and the mixture weights have
//! natural parameters `θ*_{C,j} = θ_{C,j} + ψ_N(θ_N + Θ_j) - ψ_N(θ_N)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{
    categorical_log_partition_raw, dot_counts, poisson_log_partition_raw,
    sample_index, sample_poisson_raw, to_natural, CountVector, MeanParams, NaturalParams,
};
use crate::linalg::Matrix;
use crate::scalar::{dot, log_sum_exp, softmax_in_place, Scalar};
use crate::seed::Rng;

/// Natural parameters of a count/category harmonium.
///
/// `interaction` has one row per nonzero category; row `j - 1` holds `Θ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HarmoniumParams<T> {
    pub bias_n: Vec<T>,
    pub bias_c: Vec<T>,
    pub interaction: Matrix<T>,
}

impl<T: Scalar> HarmoniumParams<T> {
    pub fn new(bias_n: Vec<T>, bias_c: Vec<T>, interaction: Matrix<T>) -> Result<Self> {
        let h = Self {
            bias_n,
            bias_c,
            interaction,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn zeros(neurons: usize, latent_dim: usize) -> Self {
        Self {
            bias_n: vec![T::zero(); neurons],
            bias_c: vec![T::zero(); latent_dim],
            interaction: Matrix::zeros(latent_dim, neurons),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interaction.rows() != self.bias_c.len()
            || self.interaction.cols() != self.bias_n.len()
        {
            return Err(Error::Shape(format!(
                "interaction is {}x{}, expected {}x{}",
                self.interaction.rows(),
                self.interaction.cols(),
                self.bias_c.len(),
                self.bias_n.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidParameter(
                "harmonium parameters must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bias_n.iter().all(|x| x.is_finite())
            && self.bias_c.iter().all(|x| x.is_finite())
            && self.interaction.is_finite()
    }

    /// `m_N`.
    pub fn neurons(&self) -> usize {
        self.bias_n.len()
    }

    /// `m_C`; the model has `m_C + 1` components.
    pub fn latent_dim(&self) -> usize {
        self.bias_c.len()
    }

    pub fn components(&self) -> usize {
        self.bias_c.len() + 1
    }

    /// Natural parameters of component `j`.
    pub fn component_natural(&self, j: usize) -> Vec<T> {
        if j == 0 {
            self.bias_n.clone()
        } else {
            self.bias_n
                .iter()
                .zip(self.interaction.row(j - 1))
                .map(|(&b, &r)| b + r)
                .collect()
        }
    }

    fn check_counts(&self, n: &CountVector) -> Result<()> {
        if n.len() != self.neurons() {
            return Err(Error::Shape(format!(
                "count vector has {} entries, model has {} neurons",
                n.len(),
                self.neurons()
            )));
        }
        Ok(())
    }
}

/// Weighted-sum parameterization of the same mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MixtureParams<T> {
    pub weights: MeanParams<T>,
    pub components: Vec<NaturalParams<T>>,
}

/// Mean parameters `(η_N, η_C, H_NC)` of a harmonium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HarmoniumMeans<T> {
    pub mean_n: Vec<T>,
    pub mean_c: Vec<T>,
    pub cross: Matrix<T>,
}

/// Log-likelihood gradient with the same layout as [`HarmoniumParams`].
pub type HarmoniumGradient<T> = HarmoniumParams<T>;

/// Precomputed component quantities used by every density evaluation.
#[derive(Debug, Clone)]
pub(crate) struct MixtureView<T> {
    /// Row `j`: natural parameters of component `j`.
    pub comp_theta: Matrix<T>,
    /// Row `j`: rates of component `j`.
    pub rates: Matrix<T>,
    /// `ψ_N` of each component.
    pub comp_psi: Vec<T>,
    /// `log w_j` for all `m_C + 1` components.
    pub log_weights: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> MixtureView<T> {
    pub fn new(h: &HarmoniumParams<T>) -> Self {
        Self::with_bias(h, &h.bias_n)
    }

    /// View of the harmonium with its count bias replaced by `bias`.
    pub fn with_bias(h: &HarmoniumParams<T>, bias: &[T]) -> Self {
        let m_n = bias.len();
        let k = h.components();
        let mut comp_theta = Matrix::zeros(k, m_n);
        let mut rates = Matrix::zeros(k, m_n);
        let mut comp_psi = Vec::with_capacity(k);
        for j in 0..k {
            let mut psi = T::zero();
            for i in 0..m_n {
                let t = if j == 0 {
                    bias[i]
                } else {
                    bias[i] + h.interaction.get(j - 1, i)
                };
                let r = t.exp();
                comp_theta.set(j, i, t);
                rates.set(j, i, r);
                psi = psi + r;
            }
            comp_psi.push(psi);
        }
        // θ*_{C,j} = θ_{C,j} + ψ_j - ψ_0, with θ*_{C,0} = 0.
        let mut log_weights: Vec<T> = (0..k)
            .map(|j| {
                if j == 0 {
                    T::zero()
                } else {
                    h.bias_c[j - 1] + comp_psi[j] - comp_psi[0]
                }
            })
            .collect();
        let lse = log_sum_exp(&log_weights);
        log_weights.iter_mut().for_each(|x| *x = *x - lse);
        let weights = log_weights.iter().map(|x| x.exp()).collect();
        Self {
            comp_theta,
            rates,
            comp_psi,
            log_weights,
            weights,
        }
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    /// `log q(n, j)` for every component, written into `out`.
    pub fn joint_log_densities(&self, n: &[u32], log_base: T, out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.log_weights[j] + dot_counts(n, self.comp_theta.row(j)) - self.comp_psi[j] + log_base;
        }
    }

    /// Marginal log density; `scratch` must have one slot per component.
    pub fn marginal_log_density(&self, n: &[u32], log_base: T, scratch: &mut [T]) -> T {
        self.joint_log_densities(n, log_base, scratch);
        log_sum_exp(scratch)
    }

    /// Full posterior over components written into `out`; returns the marginal
    /// log density as a by-product.
    pub fn posterior_into(&self, n: &[u32], log_base: T, out: &mut [T]) -> T {
        self.joint_log_densities(n, log_base, out);
        let lse = log_sum_exp(out);
        out.iter_mut().for_each(|x| *x = (*x - lse).exp());
        lse
    }

    /// `Σ_j w_j λ_j`.
    pub fn mean_counts(&self) -> Vec<T> {
        let m_n = self.rates.cols();
        (0..m_n)
            .map(|i| {
                (0..self.components())
                    .map(|j| self.weights[j] * self.rates.get(j, i))
                    .sum()
            })
            .collect()
    }

    /// Adds the log-likelihood gradient at counts `n` with component
    /// responsibilities `resp` (all `m_C + 1` entries) into `grad`, scaled by
    /// `scale`. Returns the count-error vector `n - η_N` for link chaining.
    pub fn accumulate_gradient(
        &self,
        n: &[u32],
        resp: &[T],
        scale: T,
        grad: &mut HarmoniumGradient<T>,
        mean_buf: &mut [T],
    ) {
        let k = self.components();
        let m_n = n.len();
        for (i, m) in mean_buf.iter_mut().enumerate().take(m_n) {
            *m = (0..k).map(|j| self.weights[j] * self.rates.get(j, i)).sum();
        }
        for i in 0..m_n {
            let err = T::from_count(n[i]) - mean_buf[i];
            grad.bias_n[i] = grad.bias_n[i] + scale * err;
        }
        for j in 1..k {
            let w = self.weights[j];
            let r = resp[j];
            grad.bias_c[j - 1] = grad.bias_c[j - 1] + scale * (r - w);
            let rates = self.rates.row(j);
            let row = grad.interaction.row_mut(j - 1);
            for i in 0..m_n {
                row[i] = row[i] + scale * (T::from_count(n[i]) * r - w * rates[i]);
            }
        }
    }
}

pub fn harmonium_to_mixture<T: Scalar>(h: &HarmoniumParams<T>) -> MixtureParams<T> {
    let view = MixtureView::new(h);
    let components = (0..h.components())
        .map(|j| {
            NaturalParams::poisson(view.comp_theta.row(j).to_vec())
                .expect("finite component parameters")
        })
        .collect();
    MixtureParams {
        weights: MeanParams::categorical_unchecked(view.weights[1..].to_vec()),
        components,
    }
}

pub fn mixture_to_harmonium<T: Scalar>(m: &MixtureParams<T>) -> Result<HarmoniumParams<T>> {
    let latent = m.weights.len();
    if m.components.len() != latent + 1 {
        return Err(Error::Shape(format!(
            "{} components for {} weights",
            m.components.len(),
            latent + 1
        )));
    }
    let weight_natural = to_natural(&m.weights)?;
    let base = m.components[0].values();
    let neurons = base.len();
    let psi_base = poisson_log_partition_raw(base);
    let mut interaction = Matrix::zeros(latent, neurons);
    let mut bias_c = Vec::with_capacity(latent);
    for j in 1..=latent {
        let comp = m.components[j].values();
        if comp.len() != neurons {
            return Err(Error::Shape("components differ in dimension".into()));
        }
        for (i, (&c, &b)) in comp.iter().zip(base).enumerate() {
            interaction.set(j - 1, i, c - b);
        }
        bias_c.push(weight_natural.values()[j - 1] - poisson_log_partition_raw(comp) + psi_base);
    }
    HarmoniumParams::new(base.to_vec(), bias_c, interaction)
}

pub fn joint_log_density<T: Scalar>(n: &CountVector, j: usize, h: &HarmoniumParams<T>) -> Result<T> {
    h.check_counts(n)?;
    if j > h.latent_dim() {
        return Err(Error::Index {
            index: j,
            len: h.components(),
        });
    }
    let counts: Vec<T> = n.as_scalars();
    let psi_n = poisson_log_partition_raw(&h.bias_n);
    let view = MixtureView::new(h);
    // ψ_XC = ψ_N(θ_N) + ψ_C(θ*_C).
    let theta_star_c: Vec<T> = (1..h.components())
        .map(|l| h.bias_c[l - 1] + view.comp_psi[l] - view.comp_psi[0])
        .collect();
    let psi_joint = psi_n + categorical_log_partition_raw(&theta_star_c);
    let mut energy = dot(&counts, &h.bias_n);
    if j > 0 {
        energy = energy + h.bias_c[j - 1] + dot(&counts, h.interaction.row(j - 1));
    }
    Ok(energy + T::lit(n.log_base_measure()) - psi_joint)
}

pub fn marginal_log_density<T: Scalar>(n: &CountVector, h: &HarmoniumParams<T>) -> Result<T> {
    h.check_counts(n)?;
    let view = MixtureView::new(h);
    let mut scratch = vec![T::zero(); h.components()];
    Ok(view.marginal_log_density(n.as_slice(), T::lit(n.log_base_measure()), &mut scratch))
}

/// Posterior component probabilities (outcomes `1..=m_C`; outcome 0 implicit).
pub fn posterior<T: Scalar>(n: &CountVector, h: &HarmoniumParams<T>) -> Result<MeanParams<T>> {
    h.check_counts(n)?;
    let view = MixtureView::new(h);
    let mut resp = vec![T::zero(); h.components()];
    view.posterior_into(n.as_slice(), T::lit(n.log_base_measure()), &mut resp);
    Ok(MeanParams::categorical_unchecked(resp[1..].to_vec()))
}

pub fn harmonium_means<T: Scalar>(h: &HarmoniumParams<T>) -> HarmoniumMeans<T> {
    let view = MixtureView::new(h);
    let mut cross = Matrix::zeros(h.latent_dim(), h.neurons());
    for j in 1..h.components() {
        let w = view.weights[j];
        for (c, &r) in cross.row_mut(j - 1).iter_mut().zip(view.rates.row(j)) {
            *c = w * r;
        }
    }
    HarmoniumMeans {
        mean_n: view.mean_counts(),
        mean_c: view.weights[1..].to_vec(),
        cross,
    }
}

pub fn harmonium_means_to_params<T: Scalar>(m: &HarmoniumMeans<T>) -> Result<HarmoniumParams<T>> {
    let latent = m.mean_c.len();
    let neurons = m.mean_n.len();
    if m.cross.rows() != latent || m.cross.cols() != neurons {
        return Err(Error::Shape("cross moments do not match marginal means".into()));
    }
    let weights = MeanParams::categorical(m.mean_c.clone())?;
    let w0 = T::one() - m.mean_c.iter().copied().sum::<T>();
    let mut components = Vec::with_capacity(latent + 1);
    let residual: Vec<T> = (0..neurons)
        .map(|i| m.mean_n[i] - (0..latent).map(|j| m.cross.get(j, i)).sum::<T>())
        .collect();
    let base_rates: Vec<T> = residual.iter().map(|&r| r / w0).collect();
    components.push(rates_to_natural(base_rates, 0)?);
    for j in 0..latent {
        let rates: Vec<T> = m.cross.row(j).iter().map(|&c| c / m.mean_c[j]).collect();
        components.push(rates_to_natural(rates, j + 1)?);
    }
    mixture_to_harmonium(&MixtureParams {
        weights,
        components,
    })
}

fn rates_to_natural<T: Scalar>(rates: Vec<T>, component: usize) -> Result<NaturalParams<T>> {
    let means = MeanParams::poisson(rates).map_err(|_| {
        Error::OutOfDomain(format!("component {component} has a nonpositive recovered rate"))
    })?;
    to_natural(&means)
}

/// Smallest mean responsibility a component may keep through an EM step.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-10;

/// One exact EM iteration on unconditioned count data.
pub fn em_step<T: Scalar>(data: &[CountVector], h: &HarmoniumParams<T>) -> Result<HarmoniumParams<T>> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("em_step needs at least one sample".into()));
    }
    let view = MixtureView::new(h);
    let k = h.components();
    let m_n = h.neurons();
    let mut mean_n = vec![T::zero(); m_n];
    let mut mass = vec![T::zero(); k];
    let mut cross = Matrix::<T>::zeros(h.latent_dim(), m_n);
    let mut resp = vec![T::zero(); k];
    for n in data {
        h.check_counts(n)?;
        view.posterior_into(n.as_slice(), T::lit(n.log_base_measure()), &mut resp);
        for (acc, &c) in mean_n.iter_mut().zip(n.as_slice()) {
            *acc = *acc + T::from_count(c);
        }
        for j in 0..k {
            mass[j] = mass[j] + resp[j];
        }
        for j in 1..k {
            let r = resp[j];
            for (acc, &c) in cross.row_mut(j - 1).iter_mut().zip(n.as_slice()) {
                *acc = *acc + T::from_count(c) * r;
            }
        }
    }
    let total = T::from_usize(data.len()).expect("dataset size");
    for (j, m) in mass.iter().enumerate() {
        let avg = *m / total;
        if avg.as_f64() < EMPTY_COMPONENT_MASS {
            return Err(Error::DegenerateComponent {
                component: j,
                mass: avg.as_f64(),
            });
        }
    }
    let means = HarmoniumMeans {
        mean_n: mean_n.iter().map(|&x| x / total).collect(),
        mean_c: mass[1..].iter().map(|&x| x / total).collect(),
        cross: cross.map(|x| x / total),
    };
    harmonium_means_to_params(&means)
}

/// Stochastic log-likelihood gradient of the harmonium at one sample.
pub fn ll_gradients<T: Scalar>(n: &CountVector, h: &HarmoniumParams<T>) -> Result<HarmoniumGradient<T>> {
    h.check_counts(n)?;
    let view = MixtureView::new(h);
    let mut resp = vec![T::zero(); h.components()];
    view.posterior_into(n.as_slice(), T::lit(n.log_base_measure()), &mut resp);
    let mut grad = HarmoniumParams::zeros(h.neurons(), h.latent_dim());
    let mut buf = vec![T::zero(); h.neurons()];
    view.accumulate_gradient(n.as_slice(), &resp, T::one(), &mut grad, &mut buf);
    Ok(grad)
}

/// Draws `(component, counts)` from the joint distribution.
pub fn sample_joint<T: Scalar>(h: &HarmoniumParams<T>, rng: &mut Rng) -> (usize, CountVector) {
    let view = MixtureView::new(h);
    sample_from_view(&view, rng)
}

pub(crate) fn sample_from_view<T: Scalar>(view: &MixtureView<T>, rng: &mut Rng) -> (usize, CountVector) {
    let j = sample_index(&view.weights, rng);
    (j, sample_poisson_raw(view.rates.row(j), rng))
}

/// Full component probabilities `(w_0, ..., w_{m_C})`.
pub fn mixture_weights<T: Scalar>(h: &HarmoniumParams<T>) -> Vec<T> {
    let mut lw: Vec<T> = MixtureView::new(h).log_weights;
    softmax_in_place(&mut lw);
    lw
}
