//! Information criteria, model selection across component counts, the
//! adjusted Rand index, and the MAP consistency check.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::em::{FitResult, Responsibilities};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriteriaSet {
    pub aic: f64,
    pub bic: f64,
    pub aic3: f64,
    /// BIC plus twice the MAP-weighted entropy; never below `bic`.
    pub icl: f64,
    /// ICL with the entropy term added with the opposite sign, kept for
    /// comparison with implementations that use that convention.
    pub icl_signed: f64,
    pub k_free: usize,
    pub n_obs: usize,
}

impl CriteriaSet {
    pub fn get(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
            Criterion::Aic3 => self.aic3,
            Criterion::Icl => self.icl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
    Aic3,
    Icl,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Aic, Criterion::Bic, Criterion::Aic3, Criterion::Icl];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
            Criterion::Aic3 => "AIC3",
            Criterion::Icl => "ICL",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            "aic3" => Ok(Criterion::Aic3),
            "icl" => Ok(Criterion::Icl),
            other => Err(Error::InvalidArgument(format!("unknown criterion `{other}`"))),
        }
    }
}

/// `K = (G − 1) + Gd + Gd(d + 1)/2`.
pub fn count_free_params(g: usize, d: usize) -> usize {
    (g - 1) + g * d + g * d * (d + 1) / 2
}

/// `Σ_i log ẑ_{i,MAP(i)}`, the log responsibility of each observation's MAP
/// component. Zero for hard assignments.
pub fn map_log_responsibility(resp: &Responsibilities) -> f64 {
    (0..resp.n_obs())
        .map(|i| {
            let z = resp.z(i, resp.map_label(i));
            if z > 0.0 {
                z.ln()
            } else {
                0.0
            }
        })
        .sum()
}

pub fn information_criteria(loglik: f64, g: usize, d: usize, n_obs: usize, resp: &Responsibilities) -> Result<CriteriaSet> {
    if !loglik.is_finite() {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    if g == 0 || d == 0 || n_obs == 0 {
        return Err(Error::InvalidArgument("g, d and n_obs must be positive".into()));
    }
    if resp.n_obs() != n_obs || resp.n_components() != g {
        return Err(Error::DimensionMismatch { expected: n_obs * g, found: resp.n_obs() * resp.n_components() });
    }
    let k = count_free_params(g, d);
    let kf = k as f64;
    let deviance = -2.0 * loglik;
    let bic = deviance + kf * (n_obs as f64).ln();
    let entropy = map_log_responsibility(resp);
    Ok(CriteriaSet {
        aic: deviance + 2.0 * kf,
        bic,
        aic3: deviance + 3.0 * kf,
        icl: bic - 2.0 * entropy,
        icl_signed: bic + 2.0 * entropy,
        k_free: k,
        n_obs,
    })
}

/// Candidates ordered by criterion value, best first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub criterion: Criterion,
    pub best_g: usize,
    /// `(g, value)` sorted ascending by value, ties by `g`.
    pub ranked: Vec<(usize, f64)>,
}

/// Ranks `(g, criteria)` candidates; the minimum wins and ties go to the
/// smaller `g`. Non-finite values rank last.
pub fn rank_candidates(candidates: &[(usize, CriteriaSet)], criterion: Criterion) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate models to select from".into()));
    }
    let mut ranked: Vec<(usize, f64)> = candidates.iter().map(|(g, c)| (*g, c.get(criterion))).collect();
    ranked.sort_by(|a, b| {
        let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
        key(a.1).total_cmp(&key(b.1)).then(a.0.cmp(&b.0))
    });
    Ok(Selection { criterion, best_g: ranked[0].0, ranked })
}

pub fn select_best(results: &[FitResult], criterion: Criterion) -> Result<Selection> {
    let candidates: Vec<(usize, CriteriaSet)> = results.iter().map(|r| (r.params.n_components(), r.criteria)).collect();
    rank_candidates(&candidates, criterion)
}

fn choose2(k: u64) -> f64 {
    (k * k.saturating_sub(1)) as f64 / 2.0
}

/// Hubert-Arabie adjusted Rand index.
///
/// When the expected and maximum indices coincide (both partitions trivial in
/// the same way) the result is 1 for identical partitions and 0 otherwise.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash,
    B: Eq + Hash,
{
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two observations".into()));
    }
    let ia = dense_codes(a);
    let ib = dense_codes(b);
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in ia.iter().zip(&ib) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        let identical = table.len() == rows.len() && table.len() == cols.len();
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

fn dense_codes<T: Eq + Hash>(labels: &[T]) -> Vec<usize> {
    let mut codes: HashMap<&T, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = codes.len();
            *codes.entry(l).or_insert(next)
        })
        .collect()
}

/// Number of distinct MAP labels and whether it equals `g`.
pub fn map_consistency_check(resp: &Responsibilities, g: usize) -> (usize, bool) {
    let mut seen = vec![false; resp.n_components().max(g)];
    for &l in resp.map_labels() {
        seen[l] = true;
    }
    let effective = seen.iter().filter(|&&s| s).count();
    (effective, effective == g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hard(labels: &[usize], g: usize) -> Responsibilities {
        let z: Vec<Vec<f64>> = labels.iter().map(|&l| (0..g).map(|k| if k == l { 1.0 } else { 0.0 }).collect()).collect();
        Responsibilities::from_rows(&z).unwrap()
    }

    #[test]
    fn free_parameter_counts() {
        assert_eq!(count_free_params(2, 6), 55);
        assert_eq!(count_free_params(1, 1), 2);
        assert_eq!(count_free_params(3, 6), 83);
    }

    #[test]
    fn criteria_hand_example() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let c = information_criteria(-100.0, 2, 6, 1000, &hard(&labels, 2)).unwrap();
        assert_relative_eq!(c.aic, 310.0);
        assert_relative_eq!(c.bic, 200.0 + 55.0 * 1000f64.ln());
        assert!((c.bic - 579.93).abs() < 0.01);
        assert_relative_eq!(c.aic3, 365.0);
        assert_eq!(c.icl, c.bic);
        assert_eq!(c.k_free, 55);
    }

    #[test]
    fn uniform_responsibilities_penalty() {
        let resp = Responsibilities::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let c = information_criteria(-10.0, 2, 1, 2, &resp).unwrap();
        assert_relative_eq!(c.icl - c.bic, 4.0 * 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(c.bic - c.icl_signed, 4.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn criteria_reject_bad_input() {
        let resp = hard(&[0, 1], 2);
        assert!(information_criteria(f64::NAN, 2, 1, 2, &resp).is_err());
        assert!(information_criteria(-1.0, 3, 1, 2, &resp).is_err());
    }

    #[test]
    fn select_examples() {
        let mk = |bic: f64| CriteriaSet { aic: 0.0, bic, aic3: 0.0, icl: 0.0, icl_signed: 0.0, k_free: 1, n_obs: 1 };
        let s = rank_candidates(&[(1, mk(500.0)), (2, mk(450.0)), (3, mk(460.0))], Criterion::Bic).unwrap();
        assert_eq!(s.best_g, 2);
        assert_eq!(s.ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![2, 3, 1]);
        assert_eq!(rank_candidates(&[(4, mk(1.0))], Criterion::Bic).unwrap().best_g, 4);
        // ties go to the smaller g
        assert_eq!(rank_candidates(&[(3, mk(1.0)), (2, mk(1.0))], Criterion::Bic).unwrap().best_g, 2);
        assert_eq!(rank_candidates(&[(1, mk(f64::NAN)), (2, mk(9.0))], Criterion::Bic).unwrap().best_g, 2);
        assert!(rank_candidates(&[], Criterion::Aic).is_err());
    }

    #[test]
    fn criterion_parsing() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
        }
        assert!("xyz".parse::<Criterion>().is_err());
    }

    #[test]
    fn ari_examples() {
        assert_relative_eq!(adjusted_rand_index(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), -0.5);
        assert_eq!(adjusted_rand_index(&[1, 1, 2, 3], &[1, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[1, 1, 2, 3], &["x", "x", "b", "c"]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[1, 2], &[1]).is_err());
        assert!(adjusted_rand_index(&[1], &[1]).is_err());
    }

    #[test]
    fn ari_trivial_partitions() {
        // all-in-one against all-in-one
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[2, 2, 2]).unwrap(), 1.0);
        // all singletons against all singletons
        assert_eq!(adjusted_rand_index(&[1, 2, 3], &[3, 1, 2]).unwrap(), 1.0);
        // all-in-one against all singletons: M = E = 0 while partitions differ
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn map_consistency_examples() {
        assert_eq!(map_consistency_check(&hard(&[0, 0, 0], 2), 2), (1, false));
        assert_eq!(map_consistency_check(&hard(&[0, 1, 2, 0, 1, 2], 3), 3), (3, true));
    }
}
