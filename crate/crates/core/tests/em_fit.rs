use mplnclust::data_io::NormalizationFactors;
use mplnclust::em::{e_step, fit_single_g, m_step, marginal_log_likelihood, FitConfig, InitMethod};
use mplnclust::linalg::is_symmetric;
use mplnclust::sampler::SamplerConfig;
use mplnclust::selection::adjusted_rand_index;
use mplnclust::sim::{simulate, SimSpec};

fn separated_spec(n: usize, seed: u64) -> SimSpec {
    SimSpec {
        n,
        d: 2,
        weights: vec![0.4, 0.6],
        mus: vec![vec![1.0, 4.0], vec![4.0, 1.0]],
        sigmas: vec![vec![vec![0.2, 0.05], vec![0.05, 0.2]], vec![vec![0.3, -0.1], vec![-0.1, 0.3]]],
        s: None,
        seed,
    }
}

fn small_cfg(g: usize, seed: u64) -> FitConfig {
    FitConfig {
        init_runs: 2,
        init_iters: 3,
        init_sampler_iters: 300,
        max_em_iters: 15,
        min_em_iters: 5,
        sampler: SamplerConfig { total_iters: 300, ..Default::default() },
        ..FitConfig::new(g, seed)
    }
}

#[test]
fn recovers_well_separated_clusters() {
    let spec = separated_spec(60, 3);
    let out = simulate(&spec).unwrap();
    let s = NormalizationFactors::ones(2);
    let fit = fit_single_g(&out.counts, &s, &small_cfg(2, 7)).unwrap();
    let ari = adjusted_rand_index(fit.resp.map_labels(), &out.labels).unwrap();
    assert!(ari > 0.95, "ARI {ari}");
    assert_eq!(fit.effective_map_clusters, 2);
    for g in 0..2 {
        let c = fit.params.component(g);
        let truth = &spec.mus[if c.mu()[0] < c.mu()[1] { 0 } else { 1 }];
        for (a, b) in c.mu().iter().zip(truth) {
            assert!((a - b).abs() < 0.4, "mu {:?} vs {truth:?}", c.mu());
        }
    }
}

#[test]
fn em_step_invariants_hold_every_iteration() {
    let out = simulate(&separated_spec(30, 4)).unwrap();
    let s = NormalizationFactors::ones(2);
    let cfg = small_cfg(2, 1);
    let mut params = mplnclust::em::initialize(&out.counts, &s, &cfg).unwrap().params;
    for t in 1..=3 {
        let (resp, stats) = e_step(&out.counts, &s, &params, &cfg, t).unwrap();
        for i in 0..resp.n_obs() {
            let sum: f64 = resp.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
        let m = m_step(&resp, &stats, &params).unwrap();
        assert!((m.params.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for c in m.params.components() {
            assert!(is_symmetric(c.sigma(), 1e-12));
            assert!(c.sigma().clone().cholesky().is_some());
        }
        params = m.params;
    }
}

#[test]
fn single_component_fit_converges() {
    let out = simulate(&separated_spec(40, 5)).unwrap();
    let s = NormalizationFactors::ones(2);
    let cfg = FitConfig { max_em_iters: 40, ..small_cfg(1, 2) };
    let fit = fit_single_g(&out.counts, &s, &cfg).unwrap();
    assert_eq!(fit.params.weights(), &[1.0]);
    assert!(fit.converged);
    let q = fit.loglik_trace.len() / 4;
    if q > 0 {
        let head: f64 = fit.loglik_trace[..q].iter().sum::<f64>() / q as f64;
        let tail: f64 = fit.loglik_trace[fit.loglik_trace.len() - q..].iter().sum::<f64>() / q as f64;
        assert!(tail >= head, "head {head} tail {tail}");
    }
}

#[test]
fn random_init_is_deterministic() {
    let out = simulate(&separated_spec(24, 6)).unwrap();
    let s = NormalizationFactors::ones(2);
    let cfg = FitConfig { init_method: InitMethod::Random, max_em_iters: 3, min_em_iters: 3, ..small_cfg(2, 9) };
    let a = fit_single_g(&out.counts, &s, &cfg).unwrap();
    let b = fit_single_g(&out.counts, &s, &cfg).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.resp, b.resp);
}

#[test]
fn criteria_use_the_marginal_likelihood() {
    let out = simulate(&separated_spec(30, 8)).unwrap();
    let s = NormalizationFactors::ones(2);
    let cfg = FitConfig { max_em_iters: 6, ..small_cfg(2, 3) };
    let fit = fit_single_g(&out.counts, &s, &cfg).unwrap();
    let marginal = fit.marginal_loglik.expect("marginal draws are on by default");
    assert_eq!(fit.loglik(), marginal);
    assert_eq!(fit.criteria.aic, -2.0 * marginal + 2.0 * fit.k_free as f64);

    // random streams are keyed by row id, so row order only changes the summation order
    let again = marginal_log_likelihood(&out.counts, &s, &fit.params, cfg.marginal_draws, cfg.seed).unwrap();
    let reversed: Vec<usize> = (0..out.counts.n_rows()).rev().collect();
    let flipped =
        marginal_log_likelihood(&out.counts.select_rows(&reversed).unwrap(), &s, &fit.params, cfg.marginal_draws, cfg.seed).unwrap();
    assert!((again - flipped).abs() < 1e-9, "{again} vs {flipped}");

    let plug_in = FitConfig { marginal_draws: 0, ..cfg };
    let fit = fit_single_g(&out.counts, &s, &plug_in).unwrap();
    assert!(fit.marginal_loglik.is_none());
    assert_eq!(fit.loglik(), fit.plugin_loglik());
}
