//! Hamiltonian Monte Carlo for the latent log-rates `θ | y` of one
//! observation under one mixture component.
//!
//! Each chain runs plain HMC with a fixed number of leapfrog steps and an
//! identity mass matrix. The step size is tuned by dual averaging during
//! warmup. Only post-warmup draws are kept.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_io::NormalizationFactors;
use crate::mpln::{ComponentParams, LatentTarget};
use crate::seeds;
use crate::{Error, Result};

/// Energy error above which a transition counts as divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;
/// Post-warmup step sizes are drawn uniformly from `ε·[1 − j, 1 + j]` so a
/// fixed trajectory length cannot lock onto a period of the target.
const STEP_JITTER: f64 = 0.2;
/// Scale of the per-chain perturbation added to the initial point.
const INIT_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub total_iters: usize,
    pub warmup_fraction: f64,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { chains: 3, total_iters: 1000, warmup_fraction: 0.5, leapfrog_steps: 10, target_accept: 0.8, max_retries: 5 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.chains < 2 {
            return bad("at least two chains are required");
        }
        if self.total_iters < 100 {
            return bad("total_iters must be at least 100");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.leapfrog_steps == 0 {
            return bad("leapfrog_steps must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn warmup_len(&self) -> usize {
        (self.total_iters as f64 * self.warmup_fraction).round() as usize
    }

    pub fn with_total_iters(&self, total_iters: usize) -> Self {
        Self { total_iters, ..self.clone() }
    }
}

/// Per-chain sampler bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub accept_rate: f64,
    pub divergences: usize,
    /// Mean `|ΔH|` over accepted post-warmup transitions.
    pub mean_abs_energy_error: f64,
    pub step_halvings: usize,
}

/// Post-warmup draws of `m` chains × `N` iterations × `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    draws: Vec<f64>,
    n_chains: usize,
    n_draws: usize,
    dim: usize,
    warmup_len: usize,
    seed: u64,
    stats: Vec<ChainStats>,
}

impl ChainSet {
    /// Builds a chain set from `chains[c][k][j]`.
    pub fn from_draws(chains: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n_chains = chains.len();
        let n_draws = chains.first().map_or(0, Vec::len);
        let dim = chains.first().and_then(|c| c.first()).map_or(0, Vec::len);
        if n_chains == 0 || n_draws == 0 || dim == 0 {
            return Err(Error::InvalidArgument("chain set must be non-empty".into()));
        }
        let mut draws = Vec::with_capacity(n_chains * n_draws * dim);
        for c in chains {
            if c.len() != n_draws {
                return Err(Error::DimensionMismatch { expected: n_draws, found: c.len() });
            }
            for x in c {
                if x.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: x.len() });
                }
                draws.extend_from_slice(x);
            }
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("draw".into()));
        }
        Ok(Self { draws, n_chains, n_draws, dim, warmup_len: 0, seed: 0, stats: vec![ChainStats::default(); n_chains] })
    }

    /// One-dimensional chains: `chains[c][k]`.
    pub fn from_scalar_chains(chains: &[Vec<f64>]) -> Result<Self> {
        let wrapped: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.iter().map(|&v| vec![v]).collect()).collect();
        Self::from_draws(&wrapped)
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn warmup_len(&self) -> usize {
        self.warmup_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stats(&self) -> &[ChainStats] {
        &self.stats
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let start = (chain * self.n_draws + iter) * self.dim;
        &self.draws[start..start + self.dim]
    }

    /// Iterates over every retained draw, chain by chain.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim)
    }

    /// The trace of dimension `j` in each chain.
    pub fn series(&self, j: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains).map(|c| (0..self.n_draws).map(|k| self.draw(c, k)[j]).collect()).collect()
    }
}

struct Transition {
    accept_prob: f64,
    accepted: bool,
    divergent: bool,
    energy_error: f64,
}

/// Position, gradient and scratch buffers of one HMC chain.
struct Hmc<'t, 'a> {
    target: &'t LatentTarget<'a>,
    theta: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    momentum: Vec<f64>,
    prop_theta: Vec<f64>,
    prop_grad: Vec<f64>,
}

impl<'t, 'a> Hmc<'t, 'a> {
    fn new(target: &'t LatentTarget<'a>, theta: Vec<f64>) -> Result<Self> {
        let d = theta.len();
        let mut grad = vec![0.0; d];
        let logp = target.log_density_and_grad(&theta, &mut grad);
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log posterior at the initial point".into()));
        }
        Ok(Self { target, theta, grad, logp, momentum: vec![0.0; d], prop_theta: vec![0.0; d], prop_grad: vec![0.0; d] })
    }

    fn transition<R: Rng>(&mut self, step: f64, n_steps: usize, rng: &mut R) -> Transition {
        for p in self.momentum.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let kinetic0 = 0.5 * self.momentum.iter().map(|p| p * p).sum::<f64>();
        let h0 = -self.logp + kinetic0;

        self.prop_theta.copy_from_slice(&self.theta);
        self.prop_grad.copy_from_slice(&self.grad);
        let mut logp = self.logp;
        for _ in 0..n_steps {
            for (p, g) in self.momentum.iter_mut().zip(&self.prop_grad) {
                *p += 0.5 * step * g;
            }
            for (t, p) in self.prop_theta.iter_mut().zip(&self.momentum) {
                *t += step * p;
            }
            logp = self.target.log_density_and_grad(&self.prop_theta, &mut self.prop_grad);
            for (p, g) in self.momentum.iter_mut().zip(&self.prop_grad) {
                *p += 0.5 * step * g;
            }
            if !logp.is_finite() {
                break;
            }
        }
        let kinetic1 = 0.5 * self.momentum.iter().map(|p| p * p).sum::<f64>();
        let energy_error = -logp + kinetic1 - h0;
        let divergent = !energy_error.is_finite() || energy_error > DIVERGENCE_THRESHOLD;
        let accept_prob = if divergent { 0.0 } else { (-energy_error).exp().min(1.0) };
        let accepted = !divergent && rng.random::<f64>() < accept_prob;
        if accepted {
            std::mem::swap(&mut self.theta, &mut self.prop_theta);
            std::mem::swap(&mut self.grad, &mut self.prop_grad);
            self.logp = logp;
        }
        Transition { accept_prob, accepted, divergent, energy_error }
    }

    /// Doubles or halves a unit step until the one-step acceptance
    /// probability crosses 1/2.
    fn initial_step_size<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let saved = (self.theta.clone(), self.grad.clone(), self.logp);
        let mut step = 1.0;
        let first = self.probe(step, rng);
        let direction: f64 = if first > 0.5 { 1.0 } else { -1.0 };
        for _ in 0..60 {
            let a = self.probe(step, rng);
            if (direction > 0.0 && a <= 0.5) || (direction < 0.0 && a > 0.5) {
                break;
            }
            step *= 2f64.powf(direction);
        }
        (self.theta, self.grad, self.logp) = saved;
        step
    }

    fn probe<R: Rng>(&mut self, step: f64, rng: &mut R) -> f64 {
        let saved = (self.theta.clone(), self.grad.clone(), self.logp);
        let t = self.transition(step, 1, rng);
        (self.theta, self.grad, self.logp) = saved;
        t.accept_prob
    }
}

/// Nesterov dual averaging of `log ε` toward a target acceptance rate.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    count: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(initial_step: f64, target: f64) -> Self {
        Self { mu: (10.0 * initial_step).ln(), target, h_bar: 0.0, log_step: initial_step.ln(), log_step_bar: 0.0, count: 0.0 }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.count += 1.0;
        let eta = 1.0 / (self.count + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_step = self.mu - self.count.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.count.powf(-Self::KAPPA);
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar;
        self.log_step.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

/// Moment-matched starting point `log((y + 0.5) / s)`.
fn initial_point(target: &LatentTarget<'_>) -> Vec<f64> {
    target.counts().iter().zip(target.log_s()).map(|(y, ls)| (y + 0.5).ln() - ls).collect()
}

fn run_chain(target: &LatentTarget<'_>, cfg: &SamplerConfig, seed: u64, chain: usize, out: &mut Vec<f64>) -> Result<ChainStats> {
    let mut rng = seeds::rng(seeds::derive(seed, &[chain as u64]));
    let mut theta = initial_point(target);
    for t in theta.iter_mut() {
        *t += INIT_JITTER * rng.sample::<f64, _>(StandardNormal);
    }
    let mut hmc = Hmc::new(target, theta)?;
    let warmup = cfg.warmup_len();
    let kept = cfg.total_iters - warmup;

    let mut adapt = DualAveraging::new(hmc.initial_step_size(&mut rng), cfg.target_accept);
    let mut step = adapt.log_step.exp();
    for _ in 0..warmup {
        let t = hmc.transition(step, cfg.leapfrog_steps, &mut rng);
        step = adapt.update(t.accept_prob);
    }
    let mut step = adapt.final_step();
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::Sampler("step size adaptation diverged".into()));
    }

    let start_theta = hmc.theta.clone();
    let start_grad = hmc.grad.clone();
    let start_logp = hmc.logp;
    let mark = out.len();
    for halvings in 0..=cfg.max_retries {
        out.truncate(mark);
        hmc.theta.copy_from_slice(&start_theta);
        hmc.grad.copy_from_slice(&start_grad);
        hmc.logp = start_logp;
        let (mut accepted, mut divergences, mut abs_err) = (0usize, 0usize, 0.0);
        for _ in 0..kept {
            let jitter = 1.0 + STEP_JITTER * (2.0 * rng.random::<f64>() - 1.0);
            let t = hmc.transition(step * jitter, cfg.leapfrog_steps, &mut rng);
            if t.divergent {
                divergences += 1;
            }
            if t.accepted {
                accepted += 1;
                abs_err += t.energy_error.abs();
            }
            out.extend_from_slice(&hmc.theta);
        }
        if divergences * 2 <= kept {
            return Ok(ChainStats {
                step_size: step,
                accept_rate: accepted as f64 / kept as f64,
                divergences,
                mean_abs_energy_error: if accepted > 0 { abs_err / accepted as f64 } else { f64::NAN },
                step_halvings: halvings,
            });
        }
        step *= 0.5;
    }
    Err(Error::Sampler(format!("more than half of the transitions diverged after {} step-size halvings", cfg.max_retries)))
}

/// Runs `cfg.chains` independent HMC chains against `target`.
///
/// Chain `c` draws from the stream `derive(seed, [c])`, so identical inputs
/// give bit-identical output.
pub fn sample_target(target: &LatentTarget<'_>, cfg: &SamplerConfig, seed: u64) -> Result<ChainSet> {
    cfg.validate()?;
    let kept = cfg.total_iters - cfg.warmup_len();
    let d = target.dim();
    let mut draws = Vec::with_capacity(cfg.chains * kept * d);
    let mut stats = Vec::with_capacity(cfg.chains);
    for c in 0..cfg.chains {
        stats.push(run_chain(target, cfg, seed, c, &mut draws)?);
    }
    Ok(ChainSet { draws, n_chains: cfg.chains, n_draws: kept, dim: d, warmup_len: cfg.warmup_len(), seed, stats })
}

/// Samples the latent posterior of observation `y` under `params`.
pub fn sample_latent(y: &[u64], s: &NormalizationFactors, params: &ComponentParams, cfg: &SamplerConfig, seed: u64) -> Result<ChainSet> {
    let target = LatentTarget::new(y, s, params)?;
    sample_target(&target, cfg, seed)
}

/// Average of every retained draw.
pub fn posterior_mean(chains: &ChainSet) -> Vec<f64> {
    let mut mean = vec![0.0; chains.dim];
    for x in chains.iter_draws() {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    let total = (chains.n_chains * chains.n_draws) as f64;
    mean.iter_mut().for_each(|m| *m /= total);
    mean
}

/// `(1/mN) Σ_k (θ_k − center)(θ_k − center)ᵀ` over every retained draw.
pub fn posterior_scatter(chains: &ChainSet, center: &[f64]) -> Result<DMatrix<f64>> {
    let d = chains.dim;
    if center.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: center.len() });
    }
    let mut acc = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for x in chains.iter_draws() {
        for ((df, v), c) in diff.iter_mut().zip(x).zip(center) {
            *df = v - c;
        }
        for a in 0..d {
            for b in 0..=a {
                acc[a * d + b] += diff[a] * diff[b];
            }
        }
    }
    let total = (chains.n_chains * chains.n_draws) as f64;
    Ok(DMatrix::from_fn(d, d, |a, b| {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        acc[hi * d + lo] / total
    }))
}

/// Chain length for an EM iteration: `base + 10·(em_iter − 1) + 100·failures`.
pub fn grow_schedule(em_iter: usize, base: usize, failures: usize) -> usize {
    base + 10 * em_iter.saturating_sub(1) + 100 * failures
}

/// Dumps draws as `(obs, component, chain, iter, dim, value)` rows, without a
/// header.
pub fn write_chains_csv<W: Write>(out: &mut csv::Writer<W>, obs: &str, component: usize, chains: &ChainSet) -> Result<()> {
    for c in 0..chains.n_chains {
        for k in 0..chains.n_draws {
            for (j, v) in chains.draw(c, k).iter().enumerate() {
                out.write_record([
                    obs.to_string(),
                    (component + 1).to_string(),
                    (c + 1).to_string(),
                    (k + 1).to_string(),
                    (j + 1).to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    Ok(())
}
