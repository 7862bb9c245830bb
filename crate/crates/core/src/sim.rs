//! Synthetic MPLN mixture data with known labels.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::{default_ids, CountMatrix, NormalizationFactors};
use crate::mpln::{ComponentParams, MixtureParams};
use crate::seeds;
use crate::{Error, Result};

/// Largest Poisson rate a simulated cell may have.
pub const MAX_RATE: f64 = 1e15;
/// Consecutive latent draws rejected for overflow before giving up.
pub const MAX_REJECTIONS: usize = 1000;

/// A mixture to simulate from. Round-trips through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    pub mus: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<Vec<f64>>>,
    /// Per-sample normalization factors; all ones when omitted.
    #[serde(default)]
    pub s: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec {
    pub fn from_params(params: &MixtureParams, n: usize, seed: u64) -> Self {
        Self {
            n,
            d: params.dim(),
            weights: params.weights().to_vec(),
            mus: params.components().iter().map(|c| c.mu().to_vec()).collect(),
            sigmas: params.components().iter().map(ComponentParams::sigma_rows).collect(),
            s: None,
            seed,
        }
    }

    /// Validated mixture parameters.
    pub fn params(&self) -> Result<MixtureParams> {
        let g = self.weights.len();
        if self.mus.len() != g || self.sigmas.len() != g {
            return Err(Error::Simulation(format!("{g} weights but {} means and {} covariances", self.mus.len(), self.sigmas.len())));
        }
        let comps = self
            .mus
            .iter()
            .zip(&self.sigmas)
            .map(|(mu, sigma)| {
                if mu.len() != self.d {
                    return Err(Error::DimensionMismatch { expected: self.d, found: mu.len() });
                }
                ComponentParams::from_rows(mu, sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::new(self.weights.clone(), comps)
    }

    pub fn factors(&self) -> Result<NormalizationFactors> {
        match &self.s {
            None => Ok(NormalizationFactors::ones(self.d)),
            Some(s) if s.len() != self.d => Err(Error::DimensionMismatch { expected: self.d, found: s.len() }),
            Some(s) => NormalizationFactors::explicit(s),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Simulated counts with their generating labels (0-based) and latent `θ`.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub counts: CountMatrix,
    pub labels: Vec<usize>,
    pub theta: Vec<Vec<f64>>,
    pub rejections: usize,
}

/// `QΛQᵀ` with eigenvalues uniform on `[eig_low, eig_high]` and `Q` a
/// Haar-distributed orthogonal matrix.
pub fn random_pd_covariance(d: usize, eig_low: f64, eig_high: f64, seed: u64) -> Result<DMatrix<f64>> {
    Ok(random_pd_with_eigenvalues(d, eig_low, eig_high, seed)?.0)
}

/// As [`random_pd_covariance`], also returning the drawn eigenvalues.
pub fn random_pd_with_eigenvalues(d: usize, eig_low: f64, eig_high: f64, seed: u64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if d == 0 || !(eig_low > 0.0 && eig_low <= eig_high && eig_high.is_finite()) {
        return Err(Error::InvalidArgument(format!("need d ≥ 1 and 0 < eig_low ≤ eig_high, got d={d}, [{eig_low}, {eig_high}]")));
    }
    let mut rng = seeds::rng(seed);
    let gauss = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = gauss.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let lambda: Vec<f64> = (0..d).map(|_| rng.random_range(eig_low..=eig_high)).collect();
    let scaled = DMatrix::from_fn(d, d, |i, j| q[(i, j)] * lambda[j]);
    let sigma = &scaled * q.transpose();
    Ok(((&sigma + sigma.transpose()) * 0.5, lambda))
}

/// Draws `n` observations from the mixture described by `spec`.
pub fn simulate(spec: &SimSpec) -> Result<SimOutput> {
    let params = spec.params()?;
    let s = spec.factors()?;
    simulate_params(&params, &s, spec.n, spec.seed)
}

pub fn simulate_params(params: &MixtureParams, s: &NormalizationFactors, n: usize, seed: u64) -> Result<SimOutput> {
    let d = params.dim();
    if n == 0 {
        return Err(Error::Simulation("n must be positive".into()));
    }
    if s.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: s.len() });
    }
    let mut rng = seeds::rng(seed);
    let mut cumulative = Vec::with_capacity(params.n_components());
    let mut acc = 0.0;
    for w in params.weights() {
        acc += w;
        cumulative.push(acc);
    }
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut thetas = Vec::with_capacity(n);
    let mut rejections = 0;
    let mut z = vec![0.0; d];
    let mut theta = vec![0.0; d];
    for _ in 0..n {
        let u: f64 = rng.random();
        let g = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
        let comp = params.component(g);
        let mut streak = 0;
        loop {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            comp.chol().mul_lower(&z, &mut theta);
            for (t, m) in theta.iter_mut().zip(comp.mu()) {
                *t += m;
            }
            let ok = theta.iter().zip(s.log_s()).all(|(t, ls)| (t + ls).exp() <= MAX_RATE);
            if ok {
                break;
            }
            rejections += 1;
            streak += 1;
            if streak >= MAX_REJECTIONS {
                return Err(Error::Simulation(format!("{MAX_REJECTIONS} consecutive latent draws exceeded the rate limit {MAX_RATE:e}")));
            }
        }
        for (t, ls) in theta.iter().zip(s.log_s()) {
            let rate = (t + ls).exp();
            let y = if rate > 0.0 { Poisson::new(rate).map_err(|e| Error::Simulation(e.to_string()))?.sample(&mut rng) as u64 } else { 0 };
            values.push(y);
        }
        labels.push(g);
        thetas.push(theta.clone());
    }
    let counts = CountMatrix::new(values, default_ids("gene", n), default_ids("sample", d))?;
    Ok(SimOutput { counts, labels, theta: thetas, rejections })
}

fn matrix(rows: [[f64; 6]; 6]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.to_vec()).collect()
}

/// Two-component, six-sample benchmark design.
pub fn two_component_spec(n: usize, seed: u64) -> SimSpec {
    SimSpec {
        n,
        d: 6,
        weights: vec![0.79, 0.21],
        mus: vec![vec![6.5, 6.0, 6.0, 6.0, 6.0, 6.0], vec![2.0, 2.5, 2.0, 2.0, 2.0, 2.0]],
        sigmas: vec![
            matrix([
                [1.24, -0.36, -0.51, -0.04, -0.54, -0.39],
                [-0.36, 1.30, 0.11, 0.23, 0.90, -0.77],
                [-0.51, 0.11, 1.25, -0.44, -0.01, 0.04],
                [-0.04, 0.23, -0.44, 1.09, 0.84, 0.38],
                [-0.54, 0.90, -0.01, 0.84, 1.41, 0.21],
                [-0.39, -0.77, 0.04, 0.38, 0.21, 1.33],
            ]),
            matrix([
                [0.70, 0.26, -0.45, -0.30, -0.04, -0.14],
                [0.26, 0.70, 0.19, 0.27, -0.07, -0.05],
                [-0.45, 0.19, 0.70, 0.29, 0.09, 0.13],
                [-0.30, 0.27, 0.29, 0.70, 0.25, -0.04],
                [-0.04, -0.07, 0.09, 0.25, 0.70, 0.02],
                [-0.14, -0.05, 0.13, -0.04, 0.02, 0.70],
            ]),
        ],
        s: None,
        seed,
    }
}

/// Three-component, six-sample benchmark design.
pub fn three_component_spec(n: usize, seed: u64) -> SimSpec {
    SimSpec {
        n,
        d: 6,
        weights: vec![0.3, 0.5, 0.2],
        mus: vec![vec![3.0; 6], vec![6.5, 6.5, 6.5, 6.5, 6.0, 6.5], vec![1.0, -1.0, 1.0, 1.0, -1.0, 1.0]],
        sigmas: vec![
            matrix([
                [1.00, -0.29, -0.41, -0.04, -0.41, -0.31],
                [-0.29, 1.00, 0.08, 0.19, 0.66, -0.59],
                [-0.41, 0.08, 1.00, -0.38, -0.01, 0.03],
                [-0.04, 0.19, -0.38, 1.00, 0.67, 0.31],
                [-0.41, 0.66, -0.01, 0.67, 1.00, 0.15],
                [-0.31, -0.59, 0.03, 0.31, 0.15, 1.00],
            ]),
            matrix([
                [1.50, -0.03, 0.67, 0.66, -0.65, -1.06],
                [-0.03, 1.50, -0.01, 0.52, 0.14, -0.58],
                [0.67, -0.01, 1.50, 0.64, 0.28, -0.44],
                [0.66, 0.52, 0.64, 1.50, 0.56, -0.96],
                [-0.65, 0.14, 0.28, 0.56, 1.50, 0.41],
                [-1.06, -0.58, -0.44, -0.96, 0.41, 1.50],
            ]),
            matrix([
                [0.50, 0.30, -0.09, -0.06, 0.04, -0.04],
                [0.30, 0.50, -0.02, -0.02, -0.07, -0.17],
                [-0.09, -0.02, 0.50, 0.09, 0.26, 0.13],
                [-0.06, -0.02, 0.09, 0.50, -0.01, 0.19],
                [0.04, -0.07, 0.26, -0.01, 0.50, -0.10],
                [-0.04, -0.17, 0.13, 0.19, -0.10, 0.50],
            ]),
        ],
        s: None,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_eigenvalues_give_scaled_identity() {
        let m = random_pd_covariance(4, 0.7, 0.7, 3).unwrap();
        assert!((m - DMatrix::identity(4, 4) * 0.7).abs().max() < 1e-12);
    }

    #[test]
    fn eigenvalues_recovered() {
        for seed in 0..20 {
            let (m, lambda) = random_pd_with_eigenvalues(6, 0.5, 1.5, seed).unwrap();
            assert!(crate::linalg::Cholesky::new(&m).is_some());
            let mut got: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want = lambda.clone();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-8);
                assert!((0.5..=1.5).contains(b));
            }
        }
    }

    #[test]
    fn covariance_is_deterministic() {
        assert_eq!(random_pd_covariance(5, 0.5, 1.5, 9).unwrap(), random_pd_covariance(5, 0.5, 1.5, 9).unwrap());
        assert!(random_pd_covariance(3, 0.0, 1.0, 1).is_err());
        assert!(random_pd_covariance(3, 2.0, 1.0, 1).is_err());
    }

    #[test]
    fn presets_are_valid() {
        let p2 = two_component_spec(10, 0).params().unwrap();
        assert_eq!((p2.n_components(), p2.dim()), (2, 6));
        let p3 = three_component_spec(10, 0).params().unwrap();
        assert_eq!((p3.n_components(), p3.dim()), (3, 6));
        assert_relative_eq!(p3.weights()[2], 0.2);
    }

    #[test]
    fn json_round_trip() {
        let spec = three_component_spec(25, 7);
        assert_eq!(SimSpec::from_json(&spec.to_json().unwrap()).unwrap(), spec);
        let minimal = r#"{"n":3,"d":1,"weights":[1.0],"mus":[[0.0]],"sigmas":[[[1.0]]]}"#;
        let spec = SimSpec::from_json(minimal).unwrap();
        assert_eq!(spec.seed, 0);
        assert_eq!(simulate(&spec).unwrap().counts.n_rows(), 3);
    }

    #[test]
    fn rejects_inconsistent_spec() {
        let mut spec = two_component_spec(10, 0);
        spec.mus.pop();
        assert!(simulate(&spec).is_err());
        let mut spec = two_component_spec(10, 0);
        spec.s = Some(vec![1.0; 5]);
        assert!(simulate(&spec).is_err());
    }

    #[test]
    fn deterministic() {
        let a = simulate(&two_component_spec(50, 3)).unwrap();
        let b = simulate(&two_component_spec(50, 3)).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn degenerate_latent_gives_poisson_one() {
        let spec =
            SimSpec { n: 100_000, d: 1, weights: vec![1.0], mus: vec![vec![0.0]], sigmas: vec![vec![vec![1e-12]]], s: None, seed: 4 };
        let out = simulate(&spec).unwrap();
        let mean = out.counts.column(0).iter().sum::<u64>() as f64 / 1e5;
        assert!((mean - 1.0).abs() < 4.0 * (1.0f64 / 1e5).sqrt(), "{mean}");
    }

    #[test]
    fn overflow_guard_aborts() {
        let spec = SimSpec { n: 1, d: 1, weights: vec![1.0], mus: vec![vec![40.0]], sigmas: vec![vec![vec![0.01]]], s: None, seed: 1 };
        assert!(matches!(simulate(&spec), Err(Error::Simulation(_))));
    }

    #[test]
    fn unequal_offsets_scale_counts() {
        let mut spec = SimSpec {
            n: 20_000,
            d: 2,
            weights: vec![1.0],
            mus: vec![vec![1.0, 1.0]],
            sigmas: vec![vec![vec![0.1, 0.0], vec![0.0, 0.1]]],
            s: Some(vec![0.5, 2.0]),
            seed: 2,
        };
        let out = simulate(&spec).unwrap();
        let m0 = out.counts.column(0).iter().sum::<u64>() as f64;
        let m1 = out.counts.column(1).iter().sum::<u64>() as f64;
        assert!((m1 / m0 - 4.0).abs() < 0.2);
        spec.s = Some(vec![0.0, 1.0]);
        assert!(simulate(&spec).is_err());
    }
}
