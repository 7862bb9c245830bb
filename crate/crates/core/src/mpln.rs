//! Densities, gradients and moments of the multivariate Poisson-log normal
//! hierarchy
//!
//! ```text
//! Y_ij | θ_ij ~ Poisson(exp(θ_ij + log s_j)),   θ_i ~ N_d(μ, Σ)
//! ```
//!
//! Everything is evaluated in log space. Covariances always travel with their
//! Cholesky factor.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::data_io::NormalizationFactors;
use crate::linalg::{self, Cholesky};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FACTORIAL_TABLE_LEN: usize = 1024;

fn factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![0.0; FACTORIAL_TABLE_LEN];
        for k in 1..FACTORIAL_TABLE_LEN {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        t
    })
}

/// `log(y!)`: tabulated for small `y`, log-gamma beyond.
pub fn ln_factorial(y: u64) -> f64 {
    match usize::try_from(y) {
        Ok(k) if k < FACTORIAL_TABLE_LEN => factorial_table()[k],
        _ => statrs::function::gamma::ln_gamma(y as f64 + 1.0),
    }
}

/// `y·log_rate − exp(log_rate) − log(y!)`.
pub fn poisson_log_pmf(y: u64, log_rate: f64) -> f64 {
    let yf = y as f64;
    // 0·(−∞) is 0 for a zero count
    let linear = if y == 0 { 0.0 } else { yf * log_rate };
    linear - log_rate.exp() - ln_factorial(y)
}

/// Mean and covariance of the latent Gaussian for one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentParams {
    mu: Vec<f64>,
    sigma: DMatrix<f64>,
    chol: Cholesky,
    /// `Σ⁻¹`, row-major, for the sampler's gradient.
    precision: Vec<f64>,
    /// `−½ d log 2π − ½ log|Σ|`.
    log_norm: f64,
}

impl ComponentParams {
    /// Requires `sigma` symmetric (within 1e-10) and positive definite.
    pub fn new(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidArgument("empty mean vector".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: sigma.nrows() });
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("component mean".into()));
        }
        if !linalg::is_symmetric(&sigma, linalg::SYMMETRY_TOL) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let sigma = linalg::symmetrize(&sigma);
        let chol = Cholesky::new(&sigma).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self::assemble(mu, sigma, chol))
    }

    fn assemble(mu: Vec<f64>, sigma: DMatrix<f64>, chol: Cholesky) -> Self {
        let precision = chol.inverse_row_major();
        let log_norm = -0.5 * mu.len() as f64 * LN_2PI - chol.half_log_det();
        Self { mu, sigma, chol, precision, log_norm }
    }

    /// Symmetrizes and, if needed, jitters `sigma` until it factors. Returns
    /// the component and the jitter that was added.
    pub fn repaired(mu: Vec<f64>, sigma: &DMatrix<f64>) -> Result<(Self, f64)> {
        if sigma.nrows() != mu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), found: sigma.nrows() });
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("component mean".into()));
        }
        let r = linalg::factor_with_jitter(sigma)?;
        Ok((Self::assemble(mu, r.matrix, r.factor), r.jitter))
    }

    pub fn from_rows(mu: &[f64], sigma: &[Vec<f64>]) -> Result<Self> {
        let d = mu.len();
        if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: sigma.len() });
        }
        Self::new(mu.to_vec(), DMatrix::from_fn(d, d, |i, j| sigma[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn chol(&self) -> &Cholesky {
        &self.chol
    }

    pub fn sigma_rows(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| self.sigma[(i, j)]).collect()).collect()
    }
}

/// Mixing weights plus one [`ComponentParams`] per component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    weights: Vec<f64>,
    components: Vec<ComponentParams>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, components: Vec<ComponentParams>) -> Result<Self> {
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("mixing weights must be strictly positive".into()));
        }
        Self::fitted(weights, components)
    }

    /// Like [`MixtureParams::new`] but allows zero weights, which mark
    /// components that lost all their observations during fitting.
    pub(crate) fn fitted(weights: Vec<f64>, components: Vec<ComponentParams>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::DimensionMismatch { expected: components.len(), found: weights.len() });
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("mixing weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("mixing weights sum to {total}")));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: c.dim() });
        }
        Ok(Self { weights, components })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[ComponentParams] {
        &self.components
    }

    pub fn component(&self, g: usize) -> &ComponentParams {
        &self.components[g]
    }

    /// Reorders components: new component `k` is old component `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            weights: order.iter().map(|&g| self.weights[g]).collect(),
            components: order.iter().map(|&g| self.components[g].clone()).collect(),
        }
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// `½‖L⁻¹(x − μ)‖²` using `buf` as scratch.
#[inline]
fn half_mahalanobis(x: &[f64], params: &ComponentParams, buf: &mut [f64]) -> f64 {
    for ((b, xi), mi) in buf.iter_mut().zip(x).zip(&params.mu) {
        *b = xi - mi;
    }
    params.chol.solve_lower(buf);
    0.5 * buf.iter().map(|v| v * v).sum::<f64>()
}

#[inline]
fn mvn_log_density_unchecked(x: &[f64], params: &ComponentParams, buf: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * LN_2PI - params.chol.half_log_det() - half_mahalanobis(x, params, buf)
}

/// Log density of `N(μ, Σ)` at `x`.
pub fn mvn_log_density(x: &[f64], params: &ComponentParams) -> Result<f64> {
    check_dim(params.dim(), x.len())?;
    let mut buf = vec![0.0; x.len()];
    Ok(mvn_log_density_unchecked(x, params, &mut buf))
}

/// Unnormalized latent posterior `log f(y | θ) + log f(θ | μ, Σ)` for a single
/// observation and component, without the `−Σ log y_j!` constant.
///
/// This is the target the sampler draws from. Setting `with_likelihood` to
/// false leaves only the Gaussian prior, which is handy for checking the
/// sampler against an exact target.
#[derive(Debug, Clone)]
pub struct LatentTarget<'a> {
    y: Vec<f64>,
    log_s: &'a [f64],
    params: &'a ComponentParams,
    with_likelihood: bool,
}

impl<'a> LatentTarget<'a> {
    pub fn new(y: &[u64], s: &'a NormalizationFactors, params: &'a ComponentParams) -> Result<Self> {
        Self::with_log_s(y, s.log_s(), params)
    }

    pub fn with_log_s(y: &[u64], log_s: &'a [f64], params: &'a ComponentParams) -> Result<Self> {
        check_dim(params.dim(), y.len())?;
        check_dim(params.dim(), log_s.len())?;
        Ok(Self { y: y.iter().map(|&v| v as f64).collect(), log_s, params, with_likelihood: true })
    }

    /// Gaussian prior only, ignoring the counts.
    pub fn prior_only(params: &'a ComponentParams, log_s: &'a [f64]) -> Self {
        Self { y: vec![0.0; params.dim()], log_s, params, with_likelihood: false }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn params(&self) -> &ComponentParams {
        self.params
    }

    pub fn counts(&self) -> &[f64] {
        &self.y
    }

    pub fn log_s(&self) -> &[f64] {
        self.log_s
    }

    #[inline]
    fn poisson_part(&self, theta: &[f64]) -> f64 {
        if !self.with_likelihood {
            return 0.0;
        }
        theta
            .iter()
            .zip(&self.y)
            .zip(self.log_s)
            .map(|((t, y), ls)| {
                let eta = t + ls;
                y * eta - eta.exp()
            })
            .sum()
    }

    /// Log density at `theta`; `buf` must have length `dim`.
    #[inline]
    pub fn log_density(&self, theta: &[f64], buf: &mut [f64]) -> f64 {
        self.poisson_part(theta) + mvn_log_density_unchecked(theta, self.params, buf)
    }

    /// Log density and its gradient `y − exp(θ + log s) − Σ⁻¹(θ − μ)`.
    #[inline]
    pub fn log_density_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.params;
        let d = theta.len();
        let mut quad = 0.0;
        for (i, g) in grad.iter_mut().enumerate() {
            let row = &p.precision[i * d..(i + 1) * d];
            let s: f64 = row.iter().zip(theta).zip(&p.mu).map(|((a, t), m)| a * (t - m)).sum();
            quad += (theta[i] - p.mu[i]) * s;
            *g = -s;
        }
        let mut poisson = 0.0;
        if self.with_likelihood {
            for (((g, t), y), ls) in grad.iter_mut().zip(theta).zip(&self.y).zip(self.log_s) {
                let eta = t + ls;
                let rate = eta.exp();
                poisson += y * eta - rate;
                *g += y - rate;
            }
        }
        poisson + p.log_norm - 0.5 * quad
    }
}

/// `Σ_j [y_j(θ_j + log s_j) − exp(θ_j + log s_j)] + log N(θ; μ, Σ)`.
pub fn latent_log_posterior(theta: &[f64], y: &[u64], s: &NormalizationFactors, params: &ComponentParams) -> Result<f64> {
    check_dim(params.dim(), theta.len())?;
    let target = LatentTarget::new(y, s, params)?;
    let mut buf = vec![0.0; theta.len()];
    Ok(target.log_density(theta, &mut buf))
}

/// Gradient of [`latent_log_posterior`] with respect to `theta`.
pub fn latent_log_posterior_grad(theta: &[f64], y: &[u64], s: &NormalizationFactors, params: &ComponentParams) -> Result<Vec<f64>> {
    check_dim(params.dim(), theta.len())?;
    let target = LatentTarget::new(y, s, params)?;
    let mut grad = vec![0.0; theta.len()];
    target.log_density_and_grad(theta, &mut grad);
    Ok(grad)
}

/// `Σ_j log Poisson(y_j; exp(θ_j + log s_j)) + log N(θ; μ, Σ)`, including the
/// `log y_j!` terms.
pub fn component_joint_log_density(y: &[u64], theta: &[f64], s: &NormalizationFactors, params: &ComponentParams) -> Result<f64> {
    check_dim(params.dim(), theta.len())?;
    check_dim(params.dim(), y.len())?;
    check_dim(params.dim(), s.len())?;
    let mut buf = vec![0.0; theta.len()];
    Ok(joint_log_density_unchecked(y, theta, s.log_s(), params, &mut buf))
}

pub(crate) fn joint_log_density_unchecked(y: &[u64], theta: &[f64], log_s: &[f64], params: &ComponentParams, buf: &mut [f64]) -> f64 {
    let poisson: f64 = y.iter().zip(theta).zip(log_s).map(|((&yj, t), ls)| poisson_log_pmf(yj, t + ls)).sum();
    poisson + mvn_log_density_unchecked(theta, params, buf)
}

/// Per-dimension marginal mean and variance of the MPLN:
/// `E[Y_j] = s_j exp(μ_j + Σ_jj/2)`, `Var[Y_j] = E[Y_j] + E[Y_j]²(exp(Σ_jj) − 1)`.
pub fn mpln_marginal_moments(params: &ComponentParams, s: &NormalizationFactors) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(params.dim(), s.len())?;
    let mean: Vec<f64> = (0..params.dim()).map(|j| s.s()[j] * (params.mu[j] + 0.5 * params.sigma[(j, j)]).exp()).collect();
    let var = mean.iter().enumerate().map(|(j, m)| m + m * m * params.sigma[(j, j)].exp_m1()).collect();
    Ok((mean, var))
}

const MODE_MAX_ITERS: usize = 100;
const MODE_TOL: f64 = 1e-10;
/// Degrees of freedom of the importance proposal for [`marginal_log_density`].
const PROPOSAL_DOF: f64 = 5.0;

/// Mode of the latent posterior by damped Newton, and the Cholesky factor of
/// the negative Hessian `Σ⁻¹ + diag(exp(θ + log s))` there.
fn latent_mode(target: &LatentTarget) -> Result<(Vec<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let p = target.params;
    let d = target.dim();
    let precision = DMatrix::from_row_slice(d, d, &p.precision);
    let mut theta: Vec<f64> = target.y.iter().zip(target.log_s).map(|(y, ls)| (y + 0.5).ln() - ls).collect();
    let mut grad = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut value = target.log_density_and_grad(&theta, &mut grad);
    for _ in 0..MODE_MAX_ITERS {
        let hess = neg_hessian(&precision, &theta, target.log_s);
        let step = hess.cholesky().ok_or(Error::NotPositiveDefinite)?.solve(&nalgebra::DVector::from_column_slice(&grad));
        let mut scale = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let v = target.log_density(&trial, &mut buf);
            if v >= value {
                break Some(trial);
            }
            scale *= 0.5;
            if scale < 1e-8 {
                break None;
            }
        };
        let Some(trial) = accepted else { break };
        let moved = scale * step.norm();
        theta = trial;
        value = target.log_density_and_grad(&theta, &mut grad);
        if moved < MODE_TOL {
            break;
        }
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("latent posterior mode".into()));
    }
    let factor = neg_hessian(&precision, &theta, target.log_s).cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok((theta, factor))
}

fn neg_hessian(precision: &DMatrix<f64>, theta: &[f64], log_s: &[f64]) -> DMatrix<f64> {
    let mut h = precision.clone();
    for (j, (t, ls)) in theta.iter().zip(log_s).enumerate() {
        h[(j, j)] += (t + ls).exp();
    }
    h
}

/// Importance-sampling estimate of `log ∫ f(y | θ) f(θ | μ, Σ) dθ`, the
/// component's marginal probability of `y` (including `−Σ log y_j!`).
///
/// The proposal is a multivariate t with 5 degrees of freedom centred at the
/// posterior mode with the inverse negative Hessian as scale, so the
/// estimate is exact up to Monte Carlo error whatever the count level.
pub fn marginal_log_density<R: rand::Rng>(y: &[u64], log_s: &[f64], params: &ComponentParams, draws: usize, rng: &mut R) -> Result<f64> {
    use rand_distr::{ChiSquared, Distribution, StandardNormal};
    use statrs::function::gamma::ln_gamma;

    if draws == 0 {
        return Err(Error::InvalidArgument("importance sampling needs at least one draw".into()));
    }
    let target = LatentTarget::with_log_s(y, log_s, params)?;
    let d = target.dim();
    let (mode, factor) = latent_mode(&target)?;
    let upper = factor.l().transpose();
    let df = d as f64;
    let log_q_norm =
        ln_gamma((PROPOSAL_DOF + df) / 2.0) - ln_gamma(PROPOSAL_DOF / 2.0) - 0.5 * df * (PROPOSAL_DOF * std::f64::consts::PI).ln()
            + factor.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let chi = ChiSquared::new(PROPOSAL_DOF).expect("positive degrees of freedom");
    let log_y_fact: f64 = y.iter().map(|&v| ln_factorial(v)).sum();
    let mut buf = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut log_w = Vec::with_capacity(draws);
    for _ in 0..draws {
        let u = nalgebra::DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let w: f64 = chi.sample(rng);
        let r = (PROPOSAL_DOF / w).sqrt();
        // Lᵀ δ = u r gives δ ~ N(0, H⁻¹) scaled by r
        let delta = upper.solve_upper_triangular(&(&u * r)).expect("Cholesky diagonal is positive");
        for ((t, m), dl) in theta.iter_mut().zip(&mode).zip(delta.iter()) {
            *t = m + dl;
        }
        let q2 = u.norm_squared() * r * r;
        let log_q = log_q_norm - 0.5 * (PROPOSAL_DOF + df) * (q2 / PROPOSAL_DOF).ln_1p();
        log_w.push(target.log_density(&theta, &mut buf) - log_q);
    }
    let estimate = log_sum_exp(&log_w) - (draws as f64).ln() - log_y_fact;
    if !estimate.is_finite() {
        return Err(Error::NonFinite("marginal density estimate".into()));
    }
    Ok(estimate)
}

/// `log Σ exp(v)` computed stably; `−∞` for an empty or all-`−∞` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
