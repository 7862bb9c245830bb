//! Monte Carlo EM for a `G`-component MPLN mixture.
//!
//! Each E-step samples the latent posterior of every (observation,
//! component) cell with HMC, replaces `θ` by its posterior mean and forms
//! plug-in responsibilities. The M-step has closed-form updates. The loop
//! stops once the Heidelberger-Welch test accepts the log-likelihood trace
//! as stationary.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{CountMatrix, NormalizationFactors};
use crate::diagnostics::{gate_chains, heidelberger_welch};
use crate::mpln::{joint_log_density_unchecked, log_sum_exp, marginal_log_density, ComponentParams, MixtureParams};
use crate::sampler::{grow_schedule, posterior_mean, posterior_scatter, sample_latent, ChainSet, SamplerConfig};
use crate::seeds::{self, phase};
use crate::selection::{count_free_params, information_criteria, map_consistency_check, CriteriaSet};
use crate::{Error, Result};

/// Components whose total responsibility falls below this are frozen.
pub const EMPTY_WEIGHT: f64 = 1e-8;
const ROW_SUM_TOL: f64 = 1e-10;
/// Floor for the diagonal fallback covariance used when a starting group is
/// too small or degenerate to give a usable covariance.
const FALLBACK_MIN_VAR: f64 = 1e-2;

/// Posterior membership probabilities `ẑ_ig`, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    z: Vec<f64>,
    n: usize,
    g: usize,
    map: Vec<usize>,
}

impl Responsibilities {
    /// Validates rows: non-negative entries summing to 1 within 1e-10.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let g = rows.first().map_or(0, Vec::len);
        if n == 0 || g == 0 {
            return Err(Error::InvalidArgument("responsibilities must be non-empty".into()));
        }
        let mut z = Vec::with_capacity(n * g);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != g {
                return Err(Error::DimensionMismatch { expected: g, found: row.len() });
            }
            if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("responsibility row {} is not a probability vector", i + 1)));
            }
            z.extend_from_slice(row);
        }
        Ok(Self::from_flat(z, n, g))
    }

    /// One-hot rows from 0-based labels.
    pub fn hard(labels: &[usize], g: usize) -> Result<Self> {
        if labels.is_empty() || g == 0 {
            return Err(Error::InvalidArgument("responsibilities must be non-empty".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= g) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {g} components")));
        }
        let mut z = vec![0.0; labels.len() * g];
        for (i, &l) in labels.iter().enumerate() {
            z[i * g + l] = 1.0;
        }
        Ok(Self::from_flat(z, labels.len(), g))
    }

    /// Normalizes unnormalized log weights (row-major `n × g`) with
    /// log-sum-exp.
    pub fn from_log_weights(log_w: &[f64], n: usize, g: usize) -> Result<Self> {
        if log_w.len() != n * g || n == 0 || g == 0 {
            return Err(Error::DimensionMismatch { expected: n * g, found: log_w.len() });
        }
        let mut z = Vec::with_capacity(n * g);
        for (i, row) in log_w.chunks_exact(g).enumerate() {
            let lse = log_sum_exp(row);
            if !lse.is_finite() || row.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite(format!("membership weights of observation {}", i + 1)));
            }
            z.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Ok(Self::from_flat(z, n, g))
    }

    fn from_flat(z: Vec<f64>, n: usize, g: usize) -> Self {
        let map = z
            .chunks_exact(g)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Self { z, n, g, map }
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.g
    }

    pub fn z(&self, i: usize, g: usize) -> f64 {
        self.z[i * self.g + g]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.g..(i + 1) * self.g]
    }

    /// `argmax_g ẑ_ig`, ties to the lowest index.
    pub fn map_label(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn map_labels(&self) -> &[usize] {
        &self.map
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.g];
        for row in self.z.chunks_exact(self.g) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Row `k` of the result is row `order[k]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let z = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::from_flat(z, order.len(), self.g)
    }
}

/// Sampler outcome for one (observation, component) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellSummary {
    pub rhat_max: f64,
    pub neff_min: f64,
    pub passed: bool,
    /// Number of sampling attempts, including gate-triggered reruns.
    pub attempts: usize,
}

/// Posterior means `θ̄_ig` and posterior spreads `(1/mN) Σ (θ − θ̄)(θ − θ̄)ᵀ`
/// for every cell.
#[derive(Debug, Clone)]
pub struct LatentStats {
    n: usize,
    g: usize,
    d: usize,
    theta_mean: Vec<f64>,
    spread: Vec<f64>,
    cells: Vec<Option<CellSummary>>,
}

impl LatentStats {
    /// Builds stats directly; spreads are row-major `d × d`.
    pub fn from_parts(n: usize, g: usize, d: usize, theta_mean: Vec<f64>, spread: Vec<f64>) -> Result<Self> {
        if theta_mean.len() != n * g * d {
            return Err(Error::DimensionMismatch { expected: n * g * d, found: theta_mean.len() });
        }
        if spread.len() != n * g * d * d {
            return Err(Error::DimensionMismatch { expected: n * g * d * d, found: spread.len() });
        }
        Ok(Self { n, g, d, theta_mean, spread, cells: vec![None; n * g] })
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.g
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn theta_mean(&self, i: usize, g: usize) -> &[f64] {
        let c = i * self.g + g;
        &self.theta_mean[c * self.d..(c + 1) * self.d]
    }

    /// Posterior spread of the cell about its own mean.
    pub fn spread(&self, i: usize, g: usize) -> DMatrix<f64> {
        let c = i * self.g + g;
        let dd = self.d * self.d;
        DMatrix::from_row_slice(self.d, self.d, &self.spread[c * dd..(c + 1) * dd])
    }

    /// Posterior second moment about `center`: spread plus
    /// `(θ̄ − center)(θ̄ − center)ᵀ`.
    pub fn scatter_about(&self, i: usize, g: usize, center: &[f64]) -> DMatrix<f64> {
        let mean = self.theta_mean(i, g);
        let mut m = self.spread(i, g);
        for a in 0..self.d {
            for b in 0..self.d {
                m[(a, b)] += (mean[a] - center[a]) * (mean[b] - center[b]);
            }
        }
        m
    }

    /// Sampler summary of a cell; `None` for cells that were not sampled.
    pub fn cell(&self, i: usize, g: usize) -> Option<&CellSummary> {
        self.cells[i * self.g + g].as_ref()
    }

    pub fn max_rhat(&self) -> f64 {
        self.cells.iter().flatten().map(|c| c.rhat_max).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_neff(&self) -> f64 {
        self.cells.iter().flatten().map(|c| c.neff_min).fold(f64::INFINITY, f64::min)
    }

    /// Cells whose chains never passed the gate.
    pub fn gate_failures(&self) -> usize {
        self.cells.iter().flatten().filter(|c| !c.passed).count()
    }

    /// Extra sampling attempts triggered by the gate.
    pub fn retries(&self) -> usize {
        self.cells.iter().flatten().map(|c| c.attempts - 1).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Kmeans,
    Random,
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMethod::Kmeans => "kmeans",
            InitMethod::Random => "random",
        })
    }
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" => Ok(InitMethod::Kmeans),
            "random" => Ok(InitMethod::Random),
            other => Err(Error::InvalidArgument(format!("unknown initialization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub g: usize,
    pub init_method: InitMethod,
    pub init_runs: usize,
    pub init_iters: usize,
    /// Base chain length for the initialization runs.
    pub init_sampler_iters: usize,
    pub max_em_iters: usize,
    pub min_em_iters: usize,
    pub hw_alpha: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Importance draws per (observation, component) for the log-likelihood
    /// handed to the information criteria. Zero uses the plug-in value.
    pub marginal_draws: usize,
    /// Keep the final E-step chains of the first this-many input rows.
    #[serde(skip)]
    pub keep_chains: usize,
}

impl FitConfig {
    pub fn new(g: usize, seed: u64) -> Self {
        Self {
            g,
            init_method: InitMethod::Kmeans,
            init_runs: 3,
            init_iters: 10,
            init_sampler_iters: 500,
            max_em_iters: 200,
            min_em_iters: 10,
            hw_alpha: 0.05,
            sampler: SamplerConfig::default(),
            seed,
            marginal_draws: 2000,
            keep_chains: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.g == 0 {
            return bad("the number of components must be at least 1".into());
        }
        if self.init_runs == 0 || self.init_iters == 0 {
            return bad("init_runs and init_iters must be positive".into());
        }
        if self.max_em_iters == 0 || self.min_em_iters > self.max_em_iters {
            return bad(format!(
                "need 1 ≤ max_em_iters and min_em_iters ≤ max_em_iters, got {} and {}",
                self.max_em_iters, self.min_em_iters
            ));
        }
        if !(self.hw_alpha > 0.0 && self.hw_alpha < 1.0) {
            return bad(format!("hw_alpha must lie in (0, 1), got {}", self.hw_alpha));
        }
        self.sampler.validate()?;
        self.sampler.with_total_iters(self.init_sampler_iters).validate()
    }
}

/// Per-iteration record of the EM loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSummary {
    pub iter: usize,
    pub loglik: f64,
    pub rhat_max: f64,
    pub neff_min: f64,
    pub gate_failures: usize,
    pub retries: usize,
    /// `None` before the stationarity test starts.
    pub hw_pass: Option<bool>,
    pub empty_components: Vec<usize>,
}

/// Final-iteration chains of one cell, kept on request.
#[derive(Debug, Clone)]
pub struct KeptChains {
    /// Row index in the input matrix.
    pub obs: usize,
    pub component: usize,
    pub chains: ChainSet,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    /// Rows in input order.
    pub resp: Responsibilities,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub em_iters_used: usize,
    pub criteria: CriteriaSet,
    pub k_free: usize,
    pub diagnostics_log: Vec<IterationSummary>,
    pub effective_map_clusters: usize,
    /// Index of the initialization run that was kept.
    pub init_run: usize,
    pub init_logliks: Vec<f64>,
    /// Components frozen in the last M-step.
    pub empty_components: Vec<usize>,
    pub kept_chains: Vec<KeptChains>,
    /// Importance-sampled observed-data log-likelihood at the final
    /// parameters, when `marginal_draws > 0`.
    pub marginal_loglik: Option<f64>,
}

impl FitResult {
    /// The log-likelihood the criteria were computed from.
    pub fn loglik(&self) -> f64 {
        self.marginal_loglik.unwrap_or_else(|| self.plugin_loglik())
    }

    /// Plug-in log-likelihood of the last EM iteration.
    pub fn plugin_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("a fit has at least one iteration")
    }

    pub fn g(&self) -> usize {
        self.params.n_components()
    }
}

/// The k-means feature space `log((y + 1) / s)`.
pub fn transform_counts(counts: &CountMatrix, s: &NormalizationFactors) -> Vec<Vec<f64>> {
    (0..counts.n_rows()).map(|i| counts.row(i).iter().zip(s.log_s()).map(|(&y, ls)| (y as f64 + 1.0).ln() - ls).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its own center.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = seeds::rng(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (dd, p) in d2.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let d = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut sizes = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sizes[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if sizes[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / sizes[j] as f64).collect();
            }
        }
        for j in 0..k {
            if sizes[j] == 0 {
                let far = (0..n)
                    .filter(|&i| sizes[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centers[labels[a]]);
                        let db = sq_dist(&points[b], &centers[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .ok_or_else(|| Error::InvalidArgument("k-means could not re-seed an empty cluster".into()))?;
                sizes[labels[far]] -= 1;
                sizes[j] = 1;
                labels[far] = j;
                centers[j] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let changed = next != labels;
        labels = next;
        if !changed {
            break;
        }
    }
    // a final assignment can in principle empty a cluster again
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    for j in 0..k {
        if sizes[j] == 0 {
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centers[labels[a]]);
                    let db = sq_dist(&points[b], &centers[labels[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .ok_or_else(|| Error::InvalidArgument("k-means could not re-seed an empty cluster".into()))?;
            sizes[labels[far]] -= 1;
            sizes[j] = 1;
            labels[far] = j;
        }
    }
    Ok(labels)
}

/// Uniform random hard assignment with every component non-empty.
pub fn random_partition(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = seeds::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = if pos < k { pos } else { rng.random_range(0..k) };
    }
    Ok(labels)
}

/// Weights, means and covariances of the groups of a hard partition.
///
/// A group whose sample covariance cannot be repaired (for instance a single
/// point) gets a diagonal covariance from the pooled per-column variances.
pub fn params_from_partition(points: &[Vec<f64>], labels: &[usize], g: usize) -> Result<MixtureParams> {
    let n = points.len();
    if n == 0 || labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
    }
    let d = points[0].len();
    let column_mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let pooled_var: Vec<f64> = (0..d)
        .map(|j| {
            let v = points.iter().map(|p| (p[j] - column_mean[j]).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            v.max(FALLBACK_MIN_VAR)
        })
        .collect();
    let mut weights = Vec::with_capacity(g);
    let mut comps = Vec::with_capacity(g);
    for k in 0..g {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
        let m = members.len();
        if m == 0 {
            return Err(Error::InvalidArgument(format!("starting partition leaves component {} empty", k + 1)));
        }
        let mu: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / m as f64).collect();
        let fallback = || DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&pooled_var));
        let comp = if m >= 2 {
            let cov = DMatrix::from_fn(d, d, |a, b| members.iter().map(|p| (p[a] - mu[a]) * (p[b] - mu[b])).sum::<f64>() / (m - 1) as f64);
            match ComponentParams::repaired(mu.clone(), &cov) {
                Ok((c, _)) => c,
                Err(_) => ComponentParams::new(mu, fallback())?,
            }
        } else {
            ComponentParams::new(mu, fallback())?
        };
        weights.push(m as f64 / n as f64);
        comps.push(comp);
    }
    MixtureParams::new(weights, comps)
}

/// Which random streams and chain lengths an E-step uses.
#[derive(Debug, Clone, Copy)]
struct StepPlan<'k> {
    phase: u64,
    run: u64,
    em_iter: usize,
    base_iters: usize,
    keep: &'k [bool],
}

struct CellOutput {
    mean: Vec<f64>,
    spread: Vec<f64>,
    summary: CellSummary,
    chains: Option<ChainSet>,
}

struct StepOutput {
    resp: Responsibilities,
    stats: LatentStats,
    kept: Vec<(usize, usize, ChainSet)>,
}

#[allow(clippy::too_many_arguments)]
fn sample_cell(
    y: &[u64],
    s: &NormalizationFactors,
    comp: &ComponentParams,
    cfg: &FitConfig,
    plan: &StepPlan<'_>,
    obs_key: u64,
    g: usize,
    keep: bool,
) -> Result<CellOutput> {
    let mut failures = 0;
    loop {
        let iters = grow_schedule(plan.em_iter, plan.base_iters, failures);
        let sampler = cfg.sampler.with_total_iters(iters);
        let seed = seeds::derive(cfg.seed, &[plan.phase, plan.run, cfg.g as u64, obs_key, g as u64, plan.em_iter as u64, failures as u64]);
        let last_try = failures >= cfg.sampler.max_retries;
        match sample_latent(y, s, comp, &sampler, seed) {
            Ok(chains) => {
                let diag = gate_chains(&chains)?;
                if diag.pass || last_try {
                    let mean = posterior_mean(&chains);
                    let spread = posterior_scatter(&chains, &mean)?;
                    let spread: Vec<f64> =
                        (0..spread.nrows()).flat_map(|a| (0..spread.ncols()).map(move |b| (a, b))).map(|(a, b)| spread[(a, b)]).collect();
                    return Ok(CellOutput {
                        mean,
                        spread,
                        summary: CellSummary {
                            rhat_max: diag.max_rhat(),
                            neff_min: diag.min_n_eff(),
                            passed: diag.pass,
                            attempts: failures + 1,
                        },
                        chains: keep.then_some(chains),
                    });
                }
            }
            Err(e) if last_try => return Err(e),
            Err(e) => debug!("sampler failed for a cell, retrying: {e}"),
        }
        failures += 1;
    }
}

fn run_e_step(
    counts: &CountMatrix,
    s: &NormalizationFactors,
    params: &MixtureParams,
    cfg: &FitConfig,
    plan: &StepPlan<'_>,
) -> Result<StepOutput> {
    let (n, g, d) = (counts.n_rows(), params.n_components(), params.dim());
    let keys: Vec<u64> = counts.row_ids().iter().map(|id| seeds::stable_hash(id)).collect();
    let cells: Vec<Result<Option<CellOutput>>> = (0..n * g)
        .into_par_iter()
        .map(|c| {
            let (i, k) = (c / g, c % g);
            if params.weights()[k] == 0.0 {
                return Ok(None);
            }
            let keep = plan.keep.get(i).copied().unwrap_or(false);
            sample_cell(counts.row(i), s, params.component(k), cfg, plan, keys[i], k, keep).map(Some)
        })
        .collect();

    let mut theta_mean = Vec::with_capacity(n * g * d);
    let mut spread = Vec::with_capacity(n * g * d * d);
    let mut summaries = Vec::with_capacity(n * g);
    let mut kept = Vec::new();
    for (c, cell) in cells.into_iter().enumerate() {
        match cell? {
            Some(out) => {
                theta_mean.extend_from_slice(&out.mean);
                spread.extend_from_slice(&out.spread);
                summaries.push(Some(out.summary));
                if let Some(ch) = out.chains {
                    kept.push((c / g, c % g, ch));
                }
            }
            None => {
                // zero-weight component: its cells do not enter any update
                let comp = params.component(c % g);
                theta_mean.extend_from_slice(comp.mu());
                spread.extend(comp.sigma_rows().into_iter().flatten());
                summaries.push(None);
            }
        }
    }
    let mut stats = LatentStats::from_parts(n, g, d, theta_mean, spread)?;
    stats.cells = summaries;
    let (resp, _) = plug_in(counts, s, params, &stats)?;
    Ok(StepOutput { resp, stats, kept })
}

/// Plug-in responsibilities and log-likelihood at the stored posterior means.
fn plug_in(counts: &CountMatrix, s: &NormalizationFactors, params: &MixtureParams, stats: &LatentStats) -> Result<(Responsibilities, f64)> {
    let (n, g, d) = (counts.n_rows(), params.n_components(), params.dim());
    check_shapes(counts, s, params, stats)?;
    let mut buf = vec![0.0; d];
    let mut log_w = Vec::with_capacity(n * g);
    let mut loglik = 0.0;
    for i in 0..n {
        let start = log_w.len();
        for k in 0..g {
            let w = params.weights()[k];
            let v = if w == 0.0 {
                f64::NEG_INFINITY
            } else {
                w.ln() + joint_log_density_unchecked(counts.row(i), stats.theta_mean(i, k), s.log_s(), params.component(k), &mut buf)
            };
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::NonFinite(format!("joint density of observation {} under component {}", i + 1, k + 1)));
            }
            log_w.push(v);
        }
        loglik += log_sum_exp(&log_w[start..]);
    }
    if !loglik.is_finite() {
        return Err(Error::NonFinite("observed log-likelihood".into()));
    }
    Ok((Responsibilities::from_log_weights(&log_w, n, g)?, loglik))
}

fn check_shapes(counts: &CountMatrix, s: &NormalizationFactors, params: &MixtureParams, stats: &LatentStats) -> Result<()> {
    let d = params.dim();
    for found in [counts.n_cols(), s.len(), stats.dim()] {
        if found != d {
            return Err(Error::DimensionMismatch { expected: d, found });
        }
    }
    if stats.n_obs() != counts.n_rows() {
        return Err(Error::DimensionMismatch { expected: counts.n_rows(), found: stats.n_obs() });
    }
    if stats.n_components() != params.n_components() {
        return Err(Error::DimensionMismatch { expected: params.n_components(), found: stats.n_components() });
    }
    Ok(())
}

/// One E-step of the main loop at EM iteration `em_iter` (1-based).
pub fn e_step(
    counts: &CountMatrix,
    s: &NormalizationFactors,
    params: &MixtureParams,
    cfg: &FitConfig,
    em_iter: usize,
) -> Result<(Responsibilities, LatentStats)> {
    let plan = StepPlan { phase: phase::MAIN_EM, run: 0, em_iter, base_iters: cfg.sampler.total_iters, keep: &[] };
    let out = run_e_step(counts, s, params, cfg, &plan)?;
    Ok((out.resp, out.stats))
}

/// `Σ_i log Σ_g π_g f(y_i | θ̄_ig) f(θ̄_ig | μ_g, Σ_g)`.
pub fn observed_log_likelihood(counts: &CountMatrix, s: &NormalizationFactors, params: &MixtureParams, stats: &LatentStats) -> Result<f64> {
    Ok(plug_in(counts, s, params, stats)?.1)
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub params: MixtureParams,
    /// Components whose total responsibility fell below [`EMPTY_WEIGHT`] (or
    /// whose covariance could not be repaired); their parameters were kept.
    pub empty: Vec<usize>,
    /// Largest diagonal jitter added while repairing a covariance.
    pub max_jitter: f64,
}

/// Closed-form updates of `π`, `μ` and `Σ`. The covariance uses the second
/// moments of each cell about the new mean.
pub fn m_step(resp: &Responsibilities, stats: &LatentStats, previous: &MixtureParams) -> Result<MStepOutcome> {
    let (n, g, d) = (stats.n_obs(), stats.n_components(), stats.dim());
    if resp.n_obs() != n || resp.n_components() != g || previous.n_components() != g || previous.dim() != d {
        return Err(Error::DimensionMismatch { expected: n * g, found: resp.n_obs() * resp.n_components() });
    }
    let totals = resp.column_sums();
    let mut comps = Vec::with_capacity(g);
    let mut empty = Vec::new();
    let mut max_jitter: f64 = 0.0;
    for k in 0..g {
        let nz = totals[k];
        if nz < EMPTY_WEIGHT {
            empty.push(k);
            comps.push(previous.component(k).clone());
            continue;
        }
        let mut mu = vec![0.0; d];
        for i in 0..n {
            let z = resp.z(i, k);
            for (m, t) in mu.iter_mut().zip(stats.theta_mean(i, k)) {
                *m += z * t;
            }
        }
        mu.iter_mut().for_each(|m| *m /= nz);
        let mut sigma = DMatrix::zeros(d, d);
        for i in 0..n {
            let z = resp.z(i, k);
            if z > 0.0 {
                sigma += stats.scatter_about(i, k, &mu) * z;
            }
        }
        sigma /= nz;
        match ComponentParams::repaired(mu, &sigma) {
            Ok((c, jitter)) => {
                max_jitter = max_jitter.max(jitter);
                comps.push(c);
            }
            Err(e) => {
                warn!("component {} covariance could not be repaired ({e}); keeping previous parameters", k + 1);
                empty.push(k);
                comps.push(previous.component(k).clone());
            }
        }
    }
    let total: f64 = totals.iter().sum();
    let weights: Vec<f64> = totals.iter().map(|t| t / total).collect();
    Ok(MStepOutcome { params: MixtureParams::fitted(weights, comps)?, empty, max_jitter })
}

/// Starting point chosen by [`initialize`].
#[derive(Debug, Clone)]
pub struct Initialization {
    pub params: MixtureParams,
    pub resp: Responsibilities,
    pub run: usize,
    /// Final log-likelihood of each run (`NaN` for a run that failed).
    pub run_logliks: Vec<f64>,
}

/// The hard starting partition of initialization run `run`.
pub fn initial_partition(counts: &CountMatrix, s: &NormalizationFactors, cfg: &FitConfig, run: usize) -> Result<Vec<usize>> {
    let seed = seeds::derive(cfg.seed, &[phase::INIT_PARTITION, run as u64, cfg.g as u64]);
    match cfg.init_method {
        InitMethod::Kmeans => kmeans(&transform_counts(counts, s), cfg.g, 100, seed),
        InitMethod::Random => random_partition(counts.n_rows(), cfg.g, seed),
    }
}

fn init_run(counts: &CountMatrix, s: &NormalizationFactors, cfg: &FitConfig, run: usize) -> Result<(MixtureParams, Responsibilities, f64)> {
    let labels = initial_partition(counts, s, cfg, run)?;
    let mut params = params_from_partition(&transform_counts(counts, s), &labels, cfg.g)?;
    let mut last = None;
    for t in 1..=cfg.init_iters {
        let plan = StepPlan { phase: phase::INIT_EM, run: run as u64, em_iter: t, base_iters: cfg.init_sampler_iters, keep: &[] };
        let out = run_e_step(counts, s, &params, cfg, &plan)?;
        params = m_step(&out.resp, &out.stats, &params)?.params;
        last = Some(plug_in(counts, s, &params, &out.stats)?);
    }
    let (resp, loglik) = last.expect("init_iters is positive");
    Ok((params, resp, loglik))
}

/// Runs `init_runs` short MCMC-EM fits from hard partitions and keeps the
/// one with the highest final log-likelihood (ties to the earliest run).
/// A single component needs only one run.
pub fn initialize(counts: &CountMatrix, s: &NormalizationFactors, cfg: &FitConfig) -> Result<Initialization> {
    cfg.validate()?;
    if cfg.g > counts.n_rows() {
        return Err(Error::InvalidArgument(format!("{} components requested for {} observations", cfg.g, counts.n_rows())));
    }
    let runs = if cfg.g == 1 { 1 } else { cfg.init_runs };
    let mut best: Option<(MixtureParams, Responsibilities, f64, usize)> = None;
    let mut run_logliks = Vec::with_capacity(runs);
    let mut last_err = None;
    for run in 0..runs {
        match init_run(counts, s, cfg, run) {
            Ok((params, resp, ll)) => {
                debug!("G={} initialization run {} loglik {ll:.3}", cfg.g, run + 1);
                run_logliks.push(ll);
                if best.as_ref().is_none_or(|b| ll > b.2) {
                    best = Some((params, resp, ll, run));
                }
            }
            Err(e) => {
                warn!("G={} initialization run {} failed: {e}", cfg.g, run + 1);
                run_logliks.push(f64::NAN);
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((params, resp, _, run)) => Ok(Initialization { params, resp, run, run_logliks }),
        None => Err(last_err.expect("at least one run was attempted")),
    }
}

/// Fits a `cfg.g`-component mixture.
///
/// Rows are processed in order of their identifiers and every random stream
/// is keyed by identifier, so the result does not depend on row order.
pub fn fit_single_g(counts: &CountMatrix, s: &NormalizationFactors, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (n, d) = (counts.n_rows(), counts.n_cols());
    if s.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: s.len() });
    }
    if cfg.g > n {
        return Err(Error::InvalidArgument(format!("{} components requested for {n} observations", cfg.g)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts.row_ids()[a].cmp(&counts.row_ids()[b]));
    let work = counts.select_rows(&order)?;
    let keep: Vec<bool> = order.iter().map(|&orig| orig < cfg.keep_chains).collect();

    let init = initialize(&work, s, cfg)?;
    let mut params = init.params;
    let mut trace = Vec::new();
    let mut log = Vec::new();
    let mut converged = false;
    let mut resp = init.resp;
    let mut kept = Vec::new();
    let mut empty = Vec::new();
    for t in 1..=cfg.max_em_iters {
        let plan = StepPlan { phase: phase::MAIN_EM, run: 0, em_iter: t, base_iters: cfg.sampler.total_iters, keep: &keep };
        let out = run_e_step(&work, s, &params, cfg, &plan)?;
        let m = m_step(&out.resp, &out.stats, &params)?;
        let (new_resp, loglik) = plug_in(&work, s, &m.params, &out.stats)?;
        params = m.params;
        resp = new_resp;
        kept = out.kept;
        empty = m.empty;
        trace.push(loglik);
        let hw_pass = if t >= cfg.min_em_iters { Some(heidelberger_welch(&trace, cfg.hw_alpha)?.stationary) } else { None };
        debug!(
            "G={} iter {t} loglik {loglik:.3} rhat_max {:.3} neff_min {:.1} hw {:?}",
            cfg.g,
            out.stats.max_rhat(),
            out.stats.min_neff(),
            hw_pass
        );
        if out.stats.gate_failures() > 0 {
            warn!("G={} iter {t}: {} cells failed the chain gate after all retries", cfg.g, out.stats.gate_failures());
        }
        log.push(IterationSummary {
            iter: t,
            loglik,
            rhat_max: out.stats.max_rhat(),
            neff_min: out.stats.min_neff(),
            gate_failures: out.stats.gate_failures(),
            retries: out.stats.retries(),
            hw_pass,
            empty_components: empty.clone(),
        });
        if hw_pass == Some(true) {
            converged = true;
            break;
        }
    }

    let mut inverse = vec![0; n];
    for (w, &orig) in order.iter().enumerate() {
        inverse[orig] = w;
    }
    let resp = resp.select_rows(&inverse);
    let marginal =
        if cfg.marginal_draws > 0 { Some(marginal_log_likelihood(&work, s, &params, cfg.marginal_draws, cfg.seed)?) } else { None };
    let loglik = marginal.unwrap_or(*trace.last().expect("max_em_iters is positive"));
    let criteria = information_criteria(loglik, cfg.g, d, n, &resp)?;
    let (effective, _) = map_consistency_check(&resp, cfg.g);
    let kept_chains = kept.into_iter().map(|(w, component, chains)| KeptChains { obs: order[w], component, chains }).collect();
    Ok(FitResult {
        params,
        resp,
        em_iters_used: trace.len(),
        loglik_trace: trace,
        converged,
        criteria,
        k_free: count_free_params(cfg.g, d),
        diagnostics_log: log,
        effective_map_clusters: effective,
        init_run: init.run,
        init_logliks: init.run_logliks,
        empty_components: empty,
        kept_chains,
        marginal_loglik: marginal,
    })
}

/// Observed-data log-likelihood `Σ_i log Σ_g π_g f(y_i; μ_g, Σ_g)` with each
/// component integral estimated by [`marginal_log_density`].
///
/// Unlike the plug-in value, which evaluates the joint density at the
/// posterior mean, this does not reward components for being tight relative
/// to the Poisson noise, so it is the value the criteria penalize. Random
/// streams are keyed by row id.
pub fn marginal_log_likelihood(
    counts: &CountMatrix,
    s: &NormalizationFactors,
    params: &MixtureParams,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let (n, g) = (counts.n_rows(), params.n_components());
    if counts.n_cols() != params.dim() || s.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: counts.n_cols() });
    }
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = seeds::stable_hash(&counts.row_ids()[i]);
            let terms = (0..g)
                .map(|k| {
                    let w = params.weights()[k];
                    if w == 0.0 {
                        return Ok(f64::NEG_INFINITY);
                    }
                    let mut rng = seeds::rng(seeds::derive(seed, &[phase::MARGINAL, id, k as u64]));
                    Ok(w.ln() + marginal_log_density(counts.row(i), s.log_s(), params.component(k), draws, &mut rng)?)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(log_sum_exp(&terms))
        })
        .collect::<Result<_>>()?;
    let total: f64 = rows.iter().sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("observed log-likelihood".into()));
    }
    Ok(total)
}
