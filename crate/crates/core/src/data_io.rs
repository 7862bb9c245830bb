//! Count matrices (genes × samples) and per-sample normalization factors.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense n × d matrix of read counts with gene (row) and sample (column) ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    values: Vec<u64>,
    n: usize,
    d: usize,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

impl CountMatrix {
    /// Builds a matrix from row-major values, checking shape and id uniqueness.
    pub fn new(values: Vec<u64>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        let n = row_ids.len();
        let d = col_ids.len();
        if n == 0 || d == 0 {
            return Err(Error::EmptyMatrix);
        }
        if values.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, found: values.len() });
        }
        check_unique("gene", &row_ids)?;
        check_unique("sample", &col_ids)?;
        Ok(Self { values, n, d, row_ids, col_ids })
    }

    /// Convenience constructor with generated ids `gene_1..` and `sample_1..`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::RaggedRow { row: i + 1, expected: d, found: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::new(values, default_ids("gene", rows.len()), default_ids("sample", d))
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.values[i * self.d + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn column(&self, j: usize) -> Vec<u64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn column_sums(&self) -> Vec<u64> {
        let mut sums = vec![0u64; self.d];
        for row in self.values.chunks_exact(self.d) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// New matrix whose row `k` is row `order[k]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(order.len() * self.d);
        let mut ids = Vec::with_capacity(order.len());
        for &i in order {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!("row index {i} out of range")));
            }
            values.extend_from_slice(self.row(i));
            ids.push(self.row_ids[i].clone());
        }
        Self::new(values, ids, self.col_ids.clone())
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self { values: self.values.iter().map(|v| v * factor).collect(), ..self.clone() }
    }
}

pub(crate) fn default_ids(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|k| format!("{prefix}_{k}")).collect()
}

fn check_unique(kind: &'static str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { kind, id: id.clone() });
        }
    }
    Ok(())
}

fn parse_count(cell: &str, row: usize, col: usize) -> Result<u64> {
    let t = cell.trim();
    if let Ok(v) = t.parse::<u64>() {
        return Ok(v);
    }
    let msg = match t.parse::<f64>() {
        Ok(v) if v < 0.0 => format!("negative count '{t}'"),
        Ok(v) if v.fract() != 0.0 => format!("non-integer count '{t}'"),
        Ok(_) => format!("count '{t}' is out of range"),
        Err(_) => format!("not a number: '{t}'"),
    };
    Err(Error::Parse { row, col, msg })
}

/// Reads a delimited count matrix: a header row of sample ids (first cell is
/// ignored) followed by one row per gene, id first.
///
/// Reported row/column numbers are 1-based file coordinates.
pub fn load_counts(path: &Path, delimiter: u8) -> Result<CountMatrix> {
    let file = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().delimiter(delimiter).has_headers(false).flexible(true).from_reader(file);
    let mut records = reader.records();
    let header = records.next().ok_or(Error::EmptyMatrix)??;
    let col_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let d = col_ids.len();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in records.enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != d + 1 {
            return Err(Error::RaggedRow { row: line, expected: d + 1, found: rec.len() });
        }
        row_ids.push(rec[0].trim().to_string());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            values.push(parse_count(cell, line, j + 1)?);
        }
    }
    CountMatrix::new(values, row_ids, col_ids)
}

/// Writes `counts` in the layout read by [`load_counts`].
pub fn save_counts(counts: &CountMatrix, path: &Path, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_path(path)?;
    let mut header = vec!["gene_id".to_string()];
    header.extend(counts.col_ids.iter().cloned());
    w.write_record(&header)?;
    for i in 0..counts.n {
        let mut rec = vec![counts.row_ids[i].clone()];
        rec.extend(counts.row(i).iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    None,
    Libsize,
    Tmm,
}

impl std::str::FromStr for NormMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "libsize" => Ok(Self::Libsize),
            "tmm" => Ok(Self::Tmm),
            other => Err(Error::InvalidArgument(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Per-sample normalized library sizes `s_j`, rescaled to geometric mean 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizationFactors {
    s: Vec<f64>,
    #[serde(skip)]
    log_s: Vec<f64>,
    method: NormMethod,
    /// Columns whose TMM comparison had no surviving genes and fell back to 1.
    fallback_columns: Vec<usize>,
}

impl NormalizationFactors {
    /// Wraps raw positive factors, rescaling them to geometric mean 1.
    pub fn from_raw(raw: &[f64], method: NormMethod) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if raw.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("normalization factors must be positive and finite".into()));
        }
        let mean_log = raw.iter().map(|v| v.ln()).sum::<f64>() / raw.len() as f64;
        let gm = mean_log.exp();
        let s: Vec<f64> = raw.iter().map(|v| v / gm).collect();
        let log_s = s.iter().map(|v| v.ln()).collect();
        Ok(Self { s, log_s, method, fallback_columns: Vec::new() })
    }

    /// Uses the given positive factors as they are, without rescaling.
    pub fn explicit(s: &[f64]) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("normalization factors must be positive and finite".into()));
        }
        Ok(Self { s: s.to_vec(), log_s: s.iter().map(|v| v.ln()).collect(), method: NormMethod::None, fallback_columns: Vec::new() })
    }

    /// All-ones factors (no normalization).
    pub fn ones(d: usize) -> Self {
        Self { s: vec![1.0; d], log_s: vec![0.0; d], method: NormMethod::None, fallback_columns: Vec::new() }
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn log_s(&self) -> &[f64] {
        &self.log_s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn method(&self) -> NormMethod {
        self.method
    }

    pub fn fallback_columns(&self) -> &[usize] {
        &self.fallback_columns
    }

    pub fn geometric_mean(&self) -> f64 {
        (self.log_s.iter().sum::<f64>() / self.s.len() as f64).exp()
    }
}

/// Writes `(sample_id, s)` rows.
pub fn write_factors_csv<W: Write>(out: W, sample_ids: &[String], factors: &NormalizationFactors) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "s"])?;
    for (id, s) in sample_ids.iter().zip(factors.s()) {
        w.write_record([id.clone(), s.to_string()])?;
    }
    w.flush().map_err(|source| Error::Io { path: "<factors>".into(), source })?;
    Ok(())
}

pub fn compute_factors(counts: &CountMatrix, method: NormMethod) -> Result<NormalizationFactors> {
    match method {
        NormMethod::None => Ok(NormalizationFactors::ones(counts.n_cols())),
        NormMethod::Libsize => libsize_factors(counts),
        NormMethod::Tmm => tmm_factors(counts, TMM_TRIM_M, TMM_TRIM_A),
    }
}

fn checked_column_sums(counts: &CountMatrix) -> Result<Vec<f64>> {
    let sums = counts.column_sums();
    if let Some(j) = sums.iter().position(|&s| s == 0) {
        return Err(Error::ZeroColumn(counts.col_ids[j].clone()));
    }
    Ok(sums.into_iter().map(|s| s as f64).collect())
}

/// `s_j = colsum_j / geomean(colsums)`.
pub fn libsize_factors(counts: &CountMatrix) -> Result<NormalizationFactors> {
    let sums = checked_column_sums(counts)?;
    NormalizationFactors::from_raw(&sums, NormMethod::Libsize)
}

pub const TMM_TRIM_M: f64 = 0.30;
pub const TMM_TRIM_A: f64 = 0.05;

/// Type-7 (linear interpolation) sample quantile.
fn quantile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

/// Index of the value closest to the mean of `upper_quartiles` (first on ties).
pub fn select_reference(upper_quartiles: &[f64]) -> usize {
    let mean = upper_quartiles.iter().sum::<f64>() / upper_quartiles.len() as f64;
    let mut best = 0;
    for (j, q) in upper_quartiles.iter().enumerate() {
        if (q - mean).abs() < (upper_quartiles[best] - mean).abs() {
            best = j;
        }
    }
    best
}

/// Ranks with ties averaged, 1-based.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// TMM factor of `obs` against `reference`; `None` when no gene survives.
fn tmm_pair(obs: &[u64], reference: &[u64], lib_obs: f64, lib_ref: f64, trim_m: f64, trim_a: f64) -> Option<f64> {
    let mut m_vals = Vec::new();
    let mut a_vals = Vec::new();
    let mut weights = Vec::new();
    for (&o, &r) in obs.iter().zip(reference) {
        if o == 0 || r == 0 {
            continue;
        }
        let (o, r) = (o as f64, r as f64);
        let (po, pr) = (o / lib_obs, r / lib_ref);
        let var = (lib_obs - o) / lib_obs / o + (lib_ref - r) / lib_ref / r;
        m_vals.push((po / pr).log2());
        a_vals.push(0.5 * (po.log2() + pr.log2()));
        weights.push(1.0 / var);
    }
    if m_vals.is_empty() {
        return None;
    }
    if m_vals.iter().all(|m| m.abs() < 1e-6) {
        return Some(1.0);
    }
    let n = m_vals.len() as f64;
    let lo_m = (n * trim_m).floor() + 1.0;
    let hi_m = n + 1.0 - lo_m;
    let lo_a = (n * trim_a).floor() + 1.0;
    let hi_a = n + 1.0 - lo_a;
    let rank_m = average_ranks(&m_vals);
    let rank_a = average_ranks(&a_vals);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..m_vals.len() {
        let keep = rank_m[k] >= lo_m && rank_m[k] <= hi_m && rank_a[k] >= lo_a && rank_a[k] <= hi_a;
        // a gene holding the whole library has zero asymptotic variance
        if keep && weights[k].is_finite() {
            num += m_vals[k] * weights[k];
            den += weights[k];
        }
    }
    if den > 0.0 {
        Some((num / den).exp2())
    } else {
        None
    }
}

/// Trimmed mean of M-values normalization.
///
/// Each column is compared to a reference column (the one whose upper quartile
/// of library-scaled counts is closest to the mean upper quartile). Genes with
/// a zero in either column are dropped for that comparison. The surviving
/// log-ratios are trimmed by `trim_m` on M and `trim_a` on A (per tail) and
/// averaged with inverse asymptotic variance weights. The resulting factors
/// multiply the library sizes, and the products are rescaled to geometric
/// mean 1.
pub fn tmm_factors(counts: &CountMatrix, trim_m: f64, trim_a: f64) -> Result<NormalizationFactors> {
    if counts.n_cols() < 2 {
        return Err(Error::InvalidArgument("TMM needs at least two samples".into()));
    }
    for (name, t) in [("trim_m", trim_m), ("trim_a", trim_a)] {
        if !(0.0..0.5).contains(&t) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 0.5), got {t}")));
        }
    }
    let libs = checked_column_sums(counts)?;
    let columns: Vec<Vec<u64>> = (0..counts.n_cols()).map(|j| counts.column(j)).collect();
    let upper: Vec<f64> = columns
        .iter()
        .zip(&libs)
        .map(|(c, lib)| {
            let mut p: Vec<f64> = c.iter().map(|&v| v as f64 / lib).collect();
            quantile(&mut p, 0.75)
        })
        .collect();
    let r = select_reference(&upper);
    let mut fallback = Vec::new();
    let mut factors = Vec::with_capacity(columns.len());
    for (j, col) in columns.iter().enumerate() {
        match tmm_pair(col, &columns[r], libs[j], libs[r], trim_m, trim_a) {
            Some(f) => factors.push(f),
            None => {
                log::warn!("TMM: no genes survive trimming for sample '{}'; using factor 1", counts.col_ids[j]);
                fallback.push(j);
                factors.push(1.0);
            }
        }
    }
    let effective: Vec<f64> = libs.iter().zip(&factors).map(|(l, f)| l * f).collect();
    let mut out = NormalizationFactors::from_raw(&effective, NormMethod::Tmm)?;
    out.fallback_columns = fallback;
    Ok(out)
}

/// Reads a two-column `(gene_id, label)` CSV, ignoring any further columns.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::RaggedRow { row: k + 2, expected: 2, found: rec.len() });
        }
        out.push((rec[0].trim().to_string(), rec[1].trim().to_string()));
    }
    Ok(out)
}

/// Writes `(gene_id, component)` with 1-based component numbers.
pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gene_id", "component"])?;
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([id.clone(), (l + 1).to_string()])?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_tmp("gene,a,b\ng1,0,1\ng2,2,3\ng3,4,5\n");
        let m = load_counts(f.path(), b',').unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (3, 2));
        assert_eq!(m.row(2), &[4, 5]);
        assert_eq!(m.col_ids(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn loads_tsv() {
        let f = write_tmp("gene\ta\tb\ng1\t7\t8\n");
        let m = load_counts(f.path(), b'\t').unwrap();
        assert_eq!(m.row(0), &[7, 8]);
    }

    #[test]
    fn negative_cell_names_location() {
        let f = write_tmp("gene,a,b\ng1,0,1\ng2,-1,3\n");
        match load_counts(f.path(), b',') {
            Err(Error::Parse { row, col, msg }) => {
                assert_eq!((row, col), (3, 2));
                assert!(msg.contains("negative"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fractional_cell_rejected() {
        let f = write_tmp("gene,a,b\ng1,2.5,1\n");
        let err = load_counts(f.path(), b',').unwrap_err();
        assert!(err.to_string().contains("non-integer count"), "{err}");
    }

    #[test]
    fn ragged_and_duplicates_rejected() {
        let f = write_tmp("gene,a,b\ng1,1\n");
        assert!(matches!(load_counts(f.path(), b','), Err(Error::RaggedRow { row: 2, .. })));
        let f = write_tmp("gene,a,b\ng1,1,2\ng1,3,4\n");
        assert!(matches!(load_counts(f.path(), b','), Err(Error::DuplicateId { kind: "gene", .. })));
        let f = write_tmp("gene,a,a\ng1,1,2\n");
        assert!(matches!(load_counts(f.path(), b','), Err(Error::DuplicateId { kind: "sample", .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_counts(Path::new("/nonexistent/x.csv"), b','), Err(Error::Io { .. })));
    }

    #[test]
    fn libsize_examples() {
        let m = CountMatrix::from_rows(&[vec![50, 200], vec![50, 200]]).unwrap();
        let f = libsize_factors(&m).unwrap();
        assert_relative_eq!(f.s()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(f.s()[1], 2.0, epsilon = 1e-12);

        let same = CountMatrix::from_rows(&[vec![3, 3, 3], vec![1, 1, 1]]).unwrap();
        assert!(libsize_factors(&same).unwrap().s().iter().all(|&s| (s - 1.0).abs() < 1e-12));

        let single = CountMatrix::from_rows(&[vec![3], vec![9]]).unwrap();
        assert_relative_eq!(libsize_factors(&single).unwrap().s()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_column_rejected() {
        let m = CountMatrix::from_rows(&[vec![0, 2], vec![0, 1]]).unwrap();
        assert!(matches!(libsize_factors(&m), Err(Error::ZeroColumn(_))));
    }

    #[test]
    fn reference_is_closest_to_mean_quartile() {
        assert_eq!(select_reference(&[10.0, 50.0, 90.0]), 1);
    }

    #[test]
    fn quantile_type7() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile(&mut v, 0.75), 3.25);
    }

    #[test]
    fn average_ranks_handles_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn varied_rows() -> Vec<Vec<u64>> {
        (1..=40u64).map(|k| vec![k * 3 + 1, (k * 7) % 23 + 2, k * k % 31 + 5]).collect()
    }

    #[test]
    fn tmm_identical_columns_gives_ones() {
        let rows: Vec<Vec<u64>> = varied_rows().iter().map(|r| vec![r[0], r[0], r[0]]).collect();
        let f = tmm_factors(&CountMatrix::from_rows(&rows).unwrap(), TMM_TRIM_M, TMM_TRIM_A).unwrap();
        for s in f.s() {
            assert_relative_eq!(*s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tmm_proportional_columns() {
        // column 2 is exactly twice column 1: composition is identical, so the
        // TMM factors agree and the whole ratio comes from library size
        let rows: Vec<Vec<u64>> = varied_rows().iter().map(|r| vec![r[1], 2 * r[1]]).collect();
        let m = CountMatrix::from_rows(&rows).unwrap();
        for (tm, ta) in [(0.0, 0.0), (TMM_TRIM_M, TMM_TRIM_A)] {
            let f = tmm_factors(&m, tm, ta).unwrap();
            assert_relative_eq!(f.s()[1] / f.s()[0], 2.0, epsilon = 1e-12);
            assert_relative_eq!(f.geometric_mean(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tmm_discounts_a_dominant_gene() {
        // sample b has one hugely over-expressed gene; all else equal.
        let mut rows: Vec<Vec<u64>> = (1..=60u64).map(|k| vec![10 + k, 10 + k]).collect();
        rows.push(vec![10, 5000]);
        let m = CountMatrix::from_rows(&rows).unwrap();
        let tmm = tmm_factors(&m, TMM_TRIM_M, TMM_TRIM_A).unwrap();
        let lib = libsize_factors(&m).unwrap();
        // TMM keeps the two samples nearly equal; library size does not
        assert!((tmm.s()[1] / tmm.s()[0] - 1.0).abs() < 0.05, "{:?}", tmm.s());
        assert!(lib.s()[1] / lib.s()[0] > 3.0);
    }

    #[test]
    fn tmm_no_overlap_falls_back() {
        let m = CountMatrix::from_rows(&[vec![5, 0], vec![0, 5], vec![3, 0], vec![0, 4]]).unwrap();
        let f = tmm_factors(&m, TMM_TRIM_M, TMM_TRIM_A).unwrap();
        assert_eq!(f.fallback_columns().len(), 1);
    }

    #[test]
    fn tmm_argument_errors() {
        let one = CountMatrix::from_rows(&[vec![1], vec![2]]).unwrap();
        assert!(tmm_factors(&one, 0.3, 0.05).is_err());
        let two = CountMatrix::from_rows(&[vec![1, 2], vec![2, 3]]).unwrap();
        assert!(tmm_factors(&two, 0.5, 0.05).is_err());
    }

    #[test]
    fn factors_csv_layout() {
        let m = CountMatrix::from_rows(&[vec![100, 400]]).unwrap();
        let f = libsize_factors(&m).unwrap();
        let mut buf = Vec::new();
        write_factors_csv(&mut buf, m.col_ids(), &f).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,s");
        let (id, v) = lines[2].split_once(',').unwrap();
        assert_eq!(id, "sample_2");
        assert_relative_eq!(v.parse::<f64>().unwrap(), 2.0, epsilon = 1e-12);
    }
}
