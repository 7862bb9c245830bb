//! Convergence diagnostics: split-chain R̂, multi-chain effective sample
//! size, the combined chain gate, and the Heidelberger-Welch stationarity
//! test used to stop the EM loop.

use serde::Serialize;

use crate::sampler::ChainSet;
use crate::{Error, Result};

pub const RHAT_THRESHOLD: f64 = 1.1;
pub const NEFF_THRESHOLD: f64 = 100.0;
/// Reported effective sample sizes are capped at `mN` times this factor.
pub const NEFF_CAP: f64 = 1.05;
/// Cramér-von-Mises critical value at α = 0.05.
pub const CVM_CRITICAL_05: f64 = 0.4614;
/// Shortest sequence the Heidelberger-Welch test will judge.
pub const HW_MIN_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDiagnostics {
    pub rhat: Vec<f64>,
    pub n_eff: Vec<f64>,
    pub pass: bool,
}

impl ChainDiagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_n_eff(&self) -> f64 {
        self.n_eff.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with an `n − 1` denominator.
fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-chain potential scale reduction per dimension.
///
/// Every chain is cut into a first and last half of `⌊N/2⌋` draws (the middle
/// draw is dropped when `N` is odd), giving `2m` sequences. Returns 1 when
/// all sequences are constant and equal, and infinity when they are constant
/// but disagree.
pub fn potential_scale_reduction(chains: &ChainSet) -> Result<Vec<f64>> {
    let n_draws = chains.n_draws();
    if n_draws < 4 {
        return Err(Error::InvalidArgument(format!("R-hat needs at least 4 draws per chain, got {n_draws}")));
    }
    let half = n_draws / 2;
    Ok((0..chains.dim())
        .map(|j| {
            let mut seqs = Vec::with_capacity(2 * chains.n_chains());
            for c in chains.series(j) {
                seqs.push(c[..half].to_vec());
                seqs.push(c[n_draws - half..].to_vec());
            }
            split_rhat(&seqs)
        })
        .collect())
}

fn split_rhat(seqs: &[Vec<f64>]) -> f64 {
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let w = mean(&seqs.iter().map(|s| sample_var(s)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    if w <= 0.0 {
        return if b_over_n <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b_over_n) / w).sqrt()
}

/// Biased autocovariance of a centred series at `lag`.
fn autocov(centred: &[f64], lag: usize) -> f64 {
    let n = centred.len();
    centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size per dimension.
///
/// Autocorrelations combine within-chain autocovariances with the
/// between-chain variance; the sum is truncated at the first non-positive
/// pair `ρ̂_{2k} + ρ̂_{2k+1}` and the pair sums are forced monotone.
/// Results are capped at `1.05·mN`.
pub fn effective_sample_size(chains: &ChainSet) -> Result<Vec<f64>> {
    let n_draws = chains.n_draws();
    if n_draws < 4 {
        return Err(Error::InvalidArgument(format!("ESS needs at least 4 draws per chain, got {n_draws}")));
    }
    Ok((0..chains.dim()).map(|j| series_ess(&chains.series(j))).collect())
}

fn series_ess(series: &[Vec<f64>]) -> f64 {
    let m = series.len();
    let n = series[0].len();
    let total = (m * n) as f64;
    let cap = NEFF_CAP * total;
    let means: Vec<f64> = series.iter().map(|s| mean(s)).collect();
    let centred: Vec<Vec<f64>> = series.iter().zip(&means).map(|(s, mu)| s.iter().map(|v| v - mu).collect()).collect();
    let nf = n as f64;
    let mean_acov = |lag: usize| centred.iter().map(|c| autocov(c, lag)).sum::<f64>() / m as f64;

    let acov0 = mean_acov(0);
    let w = acov0 * nf / (nf - 1.0);
    let b_over_n = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    if !(var_plus > 0.0) {
        return total;
    }
    let rho = |lag: usize| 1.0 - (w - mean_acov(lag)) / var_plus;

    let mut pair_sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let even = if k == 0 { 1.0 } else { rho(2 * k) };
        let mut pair = even + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev_pair);
        pair_sum += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = -1.0 + 2.0 * pair_sum;
    if tau <= 0.0 {
        return cap;
    }
    (total / tau).min(cap)
}

/// R̂ and N_eff with the combined verdict `max R̂ < 1.1 ∧ min N_eff > 100`.
pub fn gate_chains(chains: &ChainSet) -> Result<ChainDiagnostics> {
    let rhat = potential_scale_reduction(chains)?;
    let n_eff = effective_sample_size(chains)?;
    let pass = rhat.iter().all(|&r| r < RHAT_THRESHOLD) && n_eff.iter().all(|&e| e > NEFF_THRESHOLD);
    Ok(ChainDiagnostics { rhat, n_eff, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HwOutcome {
    pub stationary: bool,
    /// First retained index of the last test performed.
    pub kept_from: usize,
}

/// Bartlett lag-window estimate of the spectral density at frequency zero,
/// with window `⌊√len⌋`.
pub fn spectral_density_zero(x: &[f64]) -> f64 {
    let n = x.len();
    let mu = mean(x);
    let centred: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let window = ((n as f64).sqrt().floor() as usize).min(n - 1);
    let mut s = autocov(&centred, 0);
    for k in 1..=window {
        s += 2.0 * (1.0 - k as f64 / (window as f64 + 1.0)) * autocov(&centred, k);
    }
    s
}

/// Cramér-von-Mises statistic of the standardized cumulative-sum bridge,
/// `Σ_k B_k² / (n² S0)`.
pub fn cvm_bridge_statistic(x: &[f64], s0: f64) -> f64 {
    let n = x.len() as f64;
    let mu = mean(x);
    let mut cum = 0.0;
    let mut total = 0.0;
    for v in x {
        cum += v - mu;
        total += cum * cum;
    }
    total / (n * n * s0)
}

/// Heidelberger-Welch stationarity test.
///
/// The spectral density at zero is estimated once, from the first half of
/// the full sequence. The test is applied after discarding 0%, 10%, …, 50%
/// of the sequence and stops at the first pass. Sequences shorter than 10
/// are reported as non-stationary and constant sequences as stationary.
pub fn heidelberger_welch(sequence: &[f64], alpha: f64) -> Result<HwOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if sequence.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Heidelberger-Welch input".into()));
    }
    let n = sequence.len();
    if n < HW_MIN_LEN {
        return Ok(HwOutcome { stationary: false, kept_from: 0 });
    }
    let first = sequence[0];
    if sequence.iter().all(|&v| v == first) {
        return Ok(HwOutcome { stationary: true, kept_from: 0 });
    }
    let critical = cvm_critical_value(alpha);
    let s0 = spectral_density_zero(&sequence[..n / 2]);
    let mut kept_from = 0;
    for step in 0..=5 {
        kept_from = step * n / 10;
        let tail = &sequence[kept_from..];
        if s0 > 0.0 {
            let stat = cvm_bridge_statistic(tail, s0);
            if stat.is_finite() && stat <= critical {
                return Ok(HwOutcome { stationary: true, kept_from });
            }
        }
    }
    Ok(HwOutcome { stationary: false, kept_from })
}

/// `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt` by the trapezoid rule, which
/// converges geometrically for this integrand.
fn bessel_k(nu: f64, x: f64) -> f64 {
    let h = 0.01_f64;
    let mut sum = 0.5 * (-x).exp();
    let mut t = h;
    loop {
        let term = (-x * t.cosh()).exp() * (nu * t).cosh();
        sum += term;
        if term < 1e-300 || term < sum * 1e-17 {
            break;
        }
        t += h;
    }
    sum * h
}

/// Limiting distribution function of the Cramér-von-Mises statistic.
pub fn cvm_cdf(q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let pi32 = std::f64::consts::PI.powf(1.5);
    let mut total = 0.0;
    let mut gamma_ratio = std::f64::consts::PI.sqrt(); // Γ(k + ½) / Γ(k + 1) at k = 0
    for k in 0..4 {
        let kf = k as f64;
        let u = (4.0 * kf + 1.0).powi(2) / (16.0 * q);
        if u <= 1e5_f64.ln() {
            let z = gamma_ratio * (4.0 * kf + 1.0).sqrt() / (pi32 * q.sqrt());
            total += z * (-u).exp() * bessel_k(0.25, u);
        }
        gamma_ratio *= (kf + 0.5) / (kf + 1.0);
    }
    total
}

/// Upper-α quantile of the Cramér-von-Mises distribution.
pub fn cvm_critical_value(alpha: f64) -> f64 {
    if (alpha - 0.05).abs() < 1e-12 {
        return CVM_CRITICAL_05;
    }
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (1e-4, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cvm_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid_chains(m: usize, n: usize, seed: u64) -> ChainSet {
        let mut rng = seeds::rng(seed);
        let c: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        ChainSet::from_scalar_chains(&c).unwrap()
    }

    fn ar1_chains(m: usize, n: usize, phi: f64, seed: u64) -> ChainSet {
        let mut rng = seeds::rng(seed);
        let scale = (1.0 - phi * phi).sqrt();
        let c: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let mut x: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        x = phi * x + scale * rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        ChainSet::from_scalar_chains(&c).unwrap()
    }

    #[test]
    fn rhat_iid_near_one() {
        let r = potential_scale_reduction(&iid_chains(3, 2000, 1)).unwrap()[0];
        assert!((0.99..=1.02).contains(&r), "{r}");
    }

    #[test]
    fn rhat_separated_chains() {
        let mut rng = seeds::rng(2);
        let c: Vec<Vec<f64>> =
            [0.0, 100.0].iter().map(|mu| (0..500).map(|_| mu + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let cs = ChainSet::from_scalar_chains(&c).unwrap();
        assert!(potential_scale_reduction(&cs).unwrap()[0] > 10.0);
        assert!(!gate_chains(&cs).unwrap().pass);
    }

    #[test]
    fn rhat_constant_chains() {
        let cs = ChainSet::from_scalar_chains(&[vec![2.0; 10], vec![2.0; 10]]).unwrap();
        assert_eq!(potential_scale_reduction(&cs).unwrap()[0], 1.0);
        let cs = ChainSet::from_scalar_chains(&[vec![2.0; 10], vec![3.0; 10]]).unwrap();
        assert!(potential_scale_reduction(&cs).unwrap()[0].is_infinite());
    }

    #[test]
    fn rhat_needs_four_draws() {
        let cs = ChainSet::from_scalar_chains(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(potential_scale_reduction(&cs).is_err());
        assert!(effective_sample_size(&cs).is_err());
    }

    #[test]
    fn rhat_explicit_formula() {
        // sequences (1,2), (3,4), (5,7), (6,8): n = 2
        let cs = ChainSet::from_scalar_chains(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 7.0, 6.0, 8.0]]).unwrap();
        let w = (0.5 + 0.5 + 2.0 + 2.0) / 4.0;
        let means = [1.5, 3.5, 6.0, 7.0];
        let gm = means.iter().sum::<f64>() / 4.0;
        let b_over_n = means.iter().map(|m| (m - gm) * (m - gm)).sum::<f64>() / 3.0;
        let expect = ((0.5 * w + b_over_n) / w).sqrt();
        assert_relative_eq!(potential_scale_reduction(&cs).unwrap()[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn ess_iid() {
        let e = effective_sample_size(&iid_chains(3, 1000, 4)).unwrap()[0];
        assert!((2400.0..=3600.0).contains(&e), "{e}");
    }

    #[test]
    fn ess_ar1() {
        let phi = 0.9;
        let cs = ar1_chains(4, 5000, phi, 5);
        let ratio = effective_sample_size(&cs).unwrap()[0] / 20000.0;
        let expect = (1.0 - phi) / (1.0 + phi);
        assert!(ratio > expect / 1.5 && ratio < expect * 1.5, "{ratio}");
    }

    #[test]
    fn ess_alternating_is_capped() {
        let alt: Vec<f64> = (0..100).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let cs = ChainSet::from_scalar_chains(&[alt.clone(), alt]).unwrap();
        let e = effective_sample_size(&cs).unwrap()[0];
        assert!((200.0..=200.0 * NEFF_CAP + 1e-9).contains(&e), "{e}");
    }

    #[test]
    fn ess_within_bounds() {
        for seed in 0..20 {
            let cs = ar1_chains(3, 200, 0.5 - 0.05 * seed as f64, seed);
            let e = effective_sample_size(&cs).unwrap()[0];
            assert!(e > 0.0 && e <= 600.0 * NEFF_CAP + 1e-9);
            let r = potential_scale_reduction(&cs).unwrap()[0];
            assert!(r >= (99.0f64 / 100.0).sqrt() - 1e-12);
        }
    }

    #[test]
    fn gate_examples() {
        assert!(gate_chains(&iid_chains(3, 500, 6)).unwrap().pass);
        let sticky = gate_chains(&ar1_chains(3, 500, 0.999, 7)).unwrap();
        assert!(!sticky.pass);
        assert!(sticky.min_n_eff() <= NEFF_THRESHOLD);
    }

    #[test]
    fn gate_is_affine_invariant() {
        let cs = ar1_chains(3, 300, 0.7, 9);
        let moved: Vec<Vec<f64>> = cs.series(0).iter().map(|c| c.iter().map(|v| -3.0 * v + 7.0).collect()).collect();
        let moved = ChainSet::from_scalar_chains(&moved).unwrap();
        let (a, b) = (gate_chains(&cs).unwrap(), gate_chains(&moved).unwrap());
        assert_relative_eq!(a.rhat[0], b.rhat[0], max_relative = 1e-9);
        assert_relative_eq!(a.n_eff[0], b.n_eff[0], max_relative = 1e-9);
    }

    #[test]
    fn hw_constant_and_short() {
        assert_eq!(heidelberger_welch(&[3.0; 50], 0.05).unwrap(), HwOutcome { stationary: true, kept_from: 0 });
        assert!(!heidelberger_welch(&[1.0, 2.0, 3.0], 0.05).unwrap().stationary);
        assert!(heidelberger_welch(&[1.0; 20], 1.5).is_err());
    }

    #[test]
    fn hw_ramp_rejected() {
        let ramp: Vec<f64> = (1..=200).map(f64::from).collect();
        let out = heidelberger_welch(&ramp, 0.05).unwrap();
        assert!(!out.stationary);
        assert_eq!(out.kept_from, 100);
    }

    #[test]
    fn hw_accepts_after_short_transient() {
        // The transient sits in the first half, which inflates S0, so the
        // full sequence already passes.
        let mut rng = seeds::rng(11);
        let mut x: Vec<f64> = (0..20).map(|k| -50.0 + 2.5 * k as f64).collect();
        x.extend((0..180).map(|_| rng.sample::<f64, _>(StandardNormal)));
        assert!(heidelberger_welch(&x, 0.05).unwrap().stationary);
    }

    #[test]
    fn hw_accepts_after_decaying_drift() {
        let mut rng = seeds::rng(12);
        let mut x: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for (k, v) in x.iter_mut().enumerate().take(60) {
            *v += 0.2 * (60 - k) as f64;
        }
        let out = heidelberger_welch(&x, 0.05).unwrap();
        assert!(out.stationary);
    }

    #[test]
    fn hw_false_rejection_rate() {
        let mut rng = seeds::rng(14);
        let rejected = (0..500)
            .filter(|_| {
                let x: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                !heidelberger_welch(&x, 0.05).unwrap().stationary
            })
            .count();
        let rate = rejected as f64 / 500.0;
        assert!((0.01..=0.12).contains(&rate), "rate {rate}");
    }

    #[test]
    fn hw_affine_invariant() {
        let mut rng = seeds::rng(13);
        for _ in 0..50 {
            let x: Vec<f64> = (0..60).map(|k| 0.02 * k as f64 + rng.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<f64> = x.iter().map(|v| 4.0 * v - 1000.0).collect();
            assert_eq!(heidelberger_welch(&x, 0.05).unwrap(), heidelberger_welch(&y, 0.05).unwrap());
        }
    }

    #[test]
    fn cvm_distribution_matches_tables() {
        // standard asymptotic quantiles of the Cramér-von-Mises statistic
        assert_relative_eq!(cvm_critical_value(0.05), 0.4614);
        assert!((cvm_critical_value(0.050001) - 0.4614).abs() < 2e-3);
        assert!((cvm_critical_value(0.10) - 0.3473).abs() < 2e-3);
        assert!((cvm_critical_value(0.01) - 0.7435).abs() < 2e-3);
        assert!((cvm_cdf(0.4614) - 0.95).abs() < 1e-3);
    }

    #[test]
    fn bessel_k_reference_values() {
        // K_{1/2}(x) = sqrt(π / 2x) e^{−x}
        for x in [0.1, 1.0, 5.0] {
            let exact = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            assert_relative_eq!(bessel_k(0.5, x), exact, max_relative = 1e-9);
        }
    }
}
