//! Batch driver behind the `mplnclust` binary: fits every component count in
//! a range, selects models and writes the result files.
//!
//! Output layout of `fit` (all CSVs have header rows):
//!
//! | file | content |
//! |------|---------|
//! | `results.json` | run settings, per-G summaries, model selection |
//! | `criteria.csv` | `G, run, loglik, K, AIC, BIC, AIC3, ICL, effective_map_clusters, converged` |
//! | `assignments_G{g}.csv` | `gene_id, map_label, z_1 … z_G` (labels 1-based) |
//! | `trace_G{g}.csv` | `iter, loglik, rhat_max, neff_min, hw_pass` |
//! | `factors.csv` | `sample_id, s` |
//! | `chains_G{g}.csv` | only with `--dump-chains` |

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use mplnclust::data_io::{self, CountMatrix, NormMethod, NormalizationFactors};
use mplnclust::em::{fit_single_g, FitConfig, FitResult, InitMethod};
use mplnclust::sampler::{write_chains_csv, SamplerConfig};
use mplnclust::seeds::{self, phase};
use mplnclust::selection::{adjusted_rand_index, rank_candidates, CriteriaSet, Criterion};
use mplnclust::sim::{self, SimSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Error = 1,
    Usage = 2,
    NoConvergence = 3,
}

/// Everything that determines a `fit` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub input: PathBuf,
    #[serde(serialize_with = "serialize_delimiter")]
    pub delimiter: u8,
    pub normalization: NormMethod,
    pub g_min: usize,
    pub g_max: usize,
    pub init: InitMethod,
    pub init_runs: usize,
    pub chains: usize,
    /// Base chain length per EM iteration.
    pub iters: usize,
    pub max_em_iters: usize,
    pub seed: u64,
    /// Not part of the result document: results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub out: PathBuf,
    pub dump_chains: usize,
    /// Importance draws per cell for the criteria log-likelihood; 0 uses the
    /// plug-in value.
    pub marginal_draws: usize,
}

fn serialize_delimiter<S: serde::Serializer>(d: &u8, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&(*d as char).to_string())
}

impl RunManifest {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        let fit = FitConfig::new(1, 0);
        Self {
            input: input.into(),
            delimiter: b',',
            normalization: NormMethod::Tmm,
            g_min: 1,
            g_max: 3,
            init: fit.init_method,
            init_runs: fit.init_runs,
            chains: fit.sampler.chains,
            iters: fit.sampler.total_iters,
            max_em_iters: fit.max_em_iters,
            seed: 1,
            workers: 1,
            out: out.into(),
            dump_chains: 0,
            marginal_draws: fit.marginal_draws,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_min < 1 || self.g_min > self.g_max {
            bail!("need 1 ≤ g-min ≤ g-max, got {}..{}", self.g_min, self.g_max);
        }
        if self.workers < 1 {
            bail!("worker count must be at least 1");
        }
        self.fit_config(self.g_min).validate()?;
        Ok(())
    }

    /// Fit settings for `g` components, with a seed derived from `g` alone.
    pub fn fit_config(&self, g: usize) -> FitConfig {
        let base = FitConfig::new(g, seeds::derive(self.seed, &[phase::PER_G, g as u64]));
        FitConfig {
            init_method: self.init,
            init_runs: self.init_runs,
            max_em_iters: self.max_em_iters,
            min_em_iters: base.min_em_iters.min(self.max_em_iters),
            sampler: SamplerConfig { chains: self.chains, total_iters: self.iters, ..SamplerConfig::default() },
            keep_chains: self.dump_chains,
            marginal_draws: self.marginal_draws,
            ..base
        }
    }
}

#[derive(Debug, Serialize)]
struct DataSummary {
    n_genes: usize,
    n_samples: usize,
    sample_ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct FactorsSummary {
    method: NormMethod,
    s: Vec<f64>,
    fallback_columns: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct Component {
    weight: f64,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    map_size: usize,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    g: usize,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    em_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loglik: Option<f64>,
    /// Plug-in value of the last EM iteration, the quantity traced for
    /// convergence.
    #[serde(skip_serializing_if = "Option::is_none")]
    plugin_loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    criteria: Option<CriteriaSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effective_map_clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init_run: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    init_logliks: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    empty_components: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gate_failures_last_iter: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    components: Vec<Component>,
}

#[derive(Debug, Serialize)]
struct Ranked {
    g: usize,
    value: f64,
}

#[derive(Debug, Serialize)]
struct SelectionSummary {
    criterion: Criterion,
    best_g: usize,
    ranked: Vec<Ranked>,
}

#[derive(Debug, Serialize)]
struct ResultsDoc {
    schema_version: u32,
    manifest: RunManifest,
    data: DataSummary,
    normalization: FactorsSummary,
    fits: Vec<FitSummary>,
    /// Model selection among converged fits; empty when none converged.
    selection: Vec<SelectionSummary>,
    files: Vec<String>,
}

/// Outcome of a `fit` run.
#[derive(Debug)]
pub struct FitRun {
    pub status: ExitStatus,
    /// Best component count per criterion, in AIC, BIC, AIC3, ICL order.
    pub selected: Vec<(Criterion, usize)>,
    pub fits: Vec<std::result::Result<FitResult, String>>,
    pub files: Vec<PathBuf>,
}

fn summarize(g: usize, fit: &std::result::Result<FitResult, String>) -> FitSummary {
    match fit {
        Ok(f) => {
            let mut sizes = vec![0usize; g];
            f.resp.map_labels().iter().for_each(|&l| sizes[l] += 1);
            FitSummary {
                g,
                status: "ok",
                error: None,
                converged: Some(f.converged),
                em_iters: Some(f.em_iters_used),
                loglik: Some(f.loglik()),
                plugin_loglik: Some(f.plugin_loglik()),
                criteria: Some(f.criteria),
                effective_map_clusters: Some(f.effective_map_clusters),
                init_run: Some(f.init_run + 1),
                init_logliks: f.init_logliks.clone(),
                empty_components: f.empty_components.iter().map(|k| k + 1).collect(),
                gate_failures_last_iter: f.diagnostics_log.last().map(|l| l.gate_failures),
                components: f
                    .params
                    .components()
                    .iter()
                    .zip(f.params.weights())
                    .zip(&sizes)
                    .map(|((c, &w), &size)| Component { weight: w, mu: c.mu().to_vec(), sigma: c.sigma_rows(), map_size: size })
                    .collect(),
            }
        }
        Err(e) => FitSummary {
            g,
            status: "failed",
            error: Some(e.clone()),
            converged: None,
            em_iters: None,
            loglik: None,
            plugin_loglik: None,
            criteria: None,
            effective_map_clusters: None,
            init_run: None,
            init_logliks: Vec::new(),
            empty_components: Vec::new(),
            gate_failures_last_iter: None,
            components: Vec::new(),
        },
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_assignments(path: &Path, ids: &[String], fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["gene_id".to_string(), "map_label".to_string()];
    header.extend((1..=fit.g()).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone(), (fit.resp.map_label(i) + 1).to_string()];
        rec.extend(fit.resp.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["iter", "loglik", "rhat_max", "neff_min", "hw_pass"])?;
    for l in &fit.diagnostics_log {
        w.write_record([
            l.iter.to_string(),
            l.loglik.to_string(),
            l.rhat_max.to_string(),
            l.neff_min.to_string(),
            l.hw_pass.map_or(String::new(), |p| p.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_criteria(path: &Path, fits: &[(usize, std::result::Result<FitResult, String>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["G", "run", "loglik", "K", "AIC", "BIC", "AIC3", "ICL", "effective_map_clusters", "converged"])?;
    for (g, fit) in fits {
        if let Ok(f) = fit {
            let c = &f.criteria;
            w.write_record([
                g.to_string(),
                (f.init_run + 1).to_string(),
                f.loglik().to_string(),
                f.k_free.to_string(),
                c.aic.to_string(),
                c.bic.to_string(),
                c.aic3.to_string(),
                c.icl.to_string(),
                f.effective_map_clusters.to_string(),
                f.converged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_chains(path: &Path, ids: &[String], fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["gene_id", "component", "chain", "iter", "dim", "value"])?;
    let mut kept: Vec<_> = fit.kept_chains.iter().collect();
    kept.sort_by_key(|k| (k.obs, k.component));
    for k in kept {
        write_chains_csv(&mut w, &ids[k.obs], k.component, &k.chains)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the `fit` pipeline and writes every output file.
pub fn run(manifest: &RunManifest) -> Result<FitRun> {
    manifest.validate()?;
    let counts = data_io::load_counts(&manifest.input, manifest.delimiter)
        .with_context(|| format!("cannot read counts from {}", manifest.input.display()))?;
    if manifest.g_max > counts.n_rows() {
        bail!("g-max {} exceeds the number of genes ({})", manifest.g_max, counts.n_rows());
    }
    let factors = data_io::compute_factors(&counts, manifest.normalization)?;
    if !factors.fallback_columns().is_empty() {
        warn!("TMM fell back to factor 1 for samples {:?}", factors.fallback_columns());
    }
    fs::create_dir_all(&manifest.out).with_context(|| format!("cannot create {}", manifest.out.display()))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(manifest.workers).build()?;
    let gs: Vec<usize> = (manifest.g_min..=manifest.g_max).collect();
    let fits: Vec<(usize, std::result::Result<FitResult, String>)> = pool.install(|| {
        gs.par_iter()
            .map(|&g| {
                info!("fitting G={g}");
                let fit = fit_single_g(&counts, &factors, &manifest.fit_config(g)).map_err(|e| e.to_string());
                if let Err(e) = &fit {
                    warn!("G={g} failed: {e}");
                }
                (g, fit)
            })
            .collect()
    });
    write_outputs(manifest, &counts, &factors, fits)
}

fn write_outputs(
    manifest: &RunManifest,
    counts: &CountMatrix,
    factors: &NormalizationFactors,
    fits: Vec<(usize, std::result::Result<FitResult, String>)>,
) -> Result<FitRun> {
    let out = &manifest.out;
    let mut files = Vec::new();
    let factors_path = out.join("factors.csv");
    data_io::write_factors_csv(create(&factors_path)?, counts.col_ids(), factors)?;
    files.push(factors_path);
    let criteria_path = out.join("criteria.csv");
    write_criteria(&criteria_path, &fits)?;
    files.push(criteria_path);
    for (g, fit) in &fits {
        if let Ok(f) = fit {
            let p = out.join(format!("assignments_G{g}.csv"));
            write_assignments(&p, counts.row_ids(), f)?;
            files.push(p);
            let p = out.join(format!("trace_G{g}.csv"));
            write_trace(&p, f)?;
            files.push(p);
            if manifest.dump_chains > 0 {
                let p = out.join(format!("chains_G{g}.csv"));
                write_chains(&p, counts.row_ids(), f)?;
                files.push(p);
            }
        }
    }

    let converged: Vec<(usize, CriteriaSet)> =
        fits.iter().filter_map(|(g, f)| f.as_ref().ok().filter(|f| f.converged).map(|f| (*g, f.criteria))).collect();
    let mut selection = Vec::new();
    let mut selected = Vec::new();
    if !converged.is_empty() {
        for c in Criterion::ALL {
            let s = rank_candidates(&converged, c)?;
            selected.push((c, s.best_g));
            selection.push(SelectionSummary {
                criterion: c,
                best_g: s.best_g,
                ranked: s.ranked.into_iter().map(|(g, value)| Ranked { g, value }).collect(),
            });
        }
    }
    let status = if converged.is_empty() { ExitStatus::NoConvergence } else { ExitStatus::Success };

    let results_path = out.join("results.json");
    let mut names: Vec<String> = files.iter().map(|p| file_name(p)).collect();
    names.push(file_name(&results_path));
    let doc = ResultsDoc {
        schema_version: SCHEMA_VERSION,
        manifest: manifest.clone(),
        data: DataSummary { n_genes: counts.n_rows(), n_samples: counts.n_cols(), sample_ids: counts.col_ids().to_vec() },
        normalization: FactorsSummary {
            method: factors.method(),
            s: factors.s().to_vec(),
            fallback_columns: factors.fallback_columns().iter().map(|j| j + 1).collect(),
        },
        fits: fits.iter().map(|(g, f)| summarize(*g, f)).collect(),
        selection,
        files: names,
    };
    let mut w = create(&results_path)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    files.push(results_path);
    Ok(FitRun { status, selected, fits: fits.into_iter().map(|(_, f)| f).collect(), files })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes a machine-readable error report to `dir/error.json`, if possible.
pub fn write_error_report(dir: &Path, err: &anyhow::Error) -> Option<PathBuf> {
    #[derive(Serialize)]
    struct Report {
        schema_version: u32,
        status: &'static str,
        error: String,
        causes: Vec<String>,
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        status: "error",
        error: err.to_string(),
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
    };
    fs::create_dir_all(dir).ok()?;
    let path = dir.join("error.json");
    let text = serde_json::to_string_pretty(&report).ok()?;
    fs::write(&path, text + "\n").ok()?;
    Some(path)
}

/// Which simulation design to draw from.
#[derive(Debug, Clone)]
pub enum SimSource {
    Spec(PathBuf),
    TwoComponent { n: usize, seed: u64 },
    ThreeComponent { n: usize, seed: u64 },
}

/// Simulates a data set and writes `counts.csv`, `labels.csv` (1-based
/// components) and the `spec.json` that produced them into `out`.
pub fn simulate(source: &SimSource, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = match source {
        SimSource::Spec(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            SimSpec::from_json(&text)?
        }
        SimSource::TwoComponent { n, seed } => sim::two_component_spec(*n, *seed),
        SimSource::ThreeComponent { n, seed } => sim::three_component_spec(*n, *seed),
    };
    let sim_out = sim::simulate(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let counts_path = out.join("counts.csv");
    data_io::save_counts(&sim_out.counts, &counts_path, b',')?;
    let labels_path = out.join("labels.csv");
    data_io::write_labels(&labels_path, sim_out.counts.row_ids(), &sim_out.labels)?;
    let spec_path = out.join("spec.json");
    fs::write(&spec_path, spec.to_json()? + "\n")?;
    Ok(vec![counts_path, labels_path, spec_path])
}

/// ARI between two label files joined on gene id.
pub fn evaluate(truth: &Path, predicted: &Path) -> Result<f64> {
    let a = data_io::read_labels(truth).with_context(|| format!("cannot read {}", truth.display()))?;
    let b = data_io::read_labels(predicted).with_context(|| format!("cannot read {}", predicted.display()))?;
    let lookup: HashMap<&str, &str> = b.iter().map(|(id, l)| (id.as_str(), l.as_str())).collect();
    if lookup.len() != a.len() {
        bail!("label files cover different genes ({} vs {})", a.len(), b.len());
    }
    let mut left = Vec::with_capacity(a.len());
    let mut right = Vec::with_capacity(a.len());
    for (id, l) in &a {
        let Some(r) = lookup.get(id.as_str()) else {
            bail!("gene `{id}` is missing from {}", predicted.display());
        };
        left.push(l.as_str());
        right.push(*r);
    }
    Ok(adjusted_rand_index(&left, &right)?)
}

/// Computes normalization factors and writes them as `sample_id,s` CSV.
pub fn normalize<W: Write>(input: &Path, delimiter: u8, method: NormMethod, out: W) -> Result<NormalizationFactors> {
    let counts = data_io::load_counts(input, delimiter).with_context(|| format!("cannot read counts from {}", input.display()))?;
    let factors = data_io::compute_factors(&counts, method)?;
    data_io::write_factors_csv(out, counts.col_ids(), &factors)?;
    Ok(factors)
}

/// Parses a delimiter argument: a single character, or `tab` / `\t`.
pub fn parse_delimiter(s: &str) -> std::result::Result<u8, String> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(format!("delimiter must be a single ASCII character or `tab`, got `{s}`")),
    }
}
