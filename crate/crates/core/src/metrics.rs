//! Evaluation metrics: run aggregates over traces and distribution
//! distances over precomputed embedding vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Classification, Outcome, RunTrace, Vote};

/// Largest dimension accepted by [`frechet_distance`] by default.
pub const DEFAULT_DIM_CAP: usize = 4096;

/// Relative tolerance for negative eigenvalues of a covariance product.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no input to aggregate")]
    EmptyInput,
    #[error("row {row} has dimension {found}, expected {expected}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("at least {needed} vectors required, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("dimension {dim} exceeds the cap of {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("covariance has eigenvalue {eigenvalue}, beyond tolerance")]
    DegenerateCovariance { eigenvalue: f64 },
    #[error("kernel bandwidth is zero")]
    ZeroBandwidth,
    #[error("paired sets differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("vector {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("embedding file, line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub tag: String,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
    count: usize,
    tag: String,
}

impl EmbeddingSet {
    pub fn new(tag: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let dim = vectors.first().ok_or(MetricsError::EmptyInput)?.len();
        if dim == 0 {
            return Err(MetricsError::DimensionMismatch { row: 0, expected: 1, found: 0 });
        }
        for (row, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(MetricsError::DimensionMismatch { row, expected: dim, found: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MetricsError::NonFinite { row });
            }
        }
        Ok(Self { tag: tag.into(), dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// A JSON header line `{"dim", "count", "tag"}` followed by one
    /// whitespace-separated row per vector.
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let err = |line: usize, message: String| MetricsError::Parse { line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let header: EmbeddingHeader = serde_json::from_str(head).map_err(|e| err(1, e.to_string()))?;
        let mut vectors = Vec::with_capacity(header.count);
        for (i, line) in lines {
            let row = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|_| err(i + 1, format!("bad number `{tok}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != header.dim {
                return Err(err(i + 1, format!("expected {} values, found {}", header.dim, row.len())));
            }
            vectors.push(row);
        }
        if vectors.len() != header.count {
            return Err(err(1, format!("header declares {} rows, found {}", header.count, vectors.len())));
        }
        Self::new(header.tag, vectors)
    }

    pub fn to_text(&self) -> String {
        let header = EmbeddingHeader { dim: self.dim, count: self.len(), tag: self.tag.clone() };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for v in &self.vectors {
            let row: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    fn mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.dim);
        for v in &self.vectors {
            mu += DVector::from_column_slice(v);
        }
        mu / self.len() as f64
    }

    /// Sample covariance with the n-1 denominator.
    fn covariance(&self, mean: &DVector<f64>) -> DMatrix<f64> {
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for v in &self.vectors {
            let d = DVector::from_column_slice(v) - mean;
            cov += &d * d.transpose();
        }
        cov / (self.len() - 1) as f64
    }
}

fn require_samples(set: &EmbeddingSet, needed: usize) -> Result<(), MetricsError> {
    if set.len() < needed {
        Err(MetricsError::TooFewSamples { needed, found: set.len() })
    } else {
        Ok(())
    }
}

fn same_dim(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(), MetricsError> {
    if a.dim != b.dim {
        Err(MetricsError::DimensionMismatch { row: 0, expected: a.dim, found: b.dim })
    } else {
        Ok(())
    }
}

/// Eigenvalues of a symmetric matrix with negatives inside the tolerance
/// set to zero.
fn clamped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_TOLERANCE * scale {
                return Err(MetricsError::DegenerateCovariance { eigenvalue: *v });
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Fréchet distance between Gaussians fitted to the two sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricsError> {
    frechet_distance_capped(a, b, DEFAULT_DIM_CAP)
}

pub fn frechet_distance_capped(a: &EmbeddingSet, b: &EmbeddingSet, cap: usize) -> Result<f64, MetricsError> {
    same_dim(a, b)?;
    if a.dim > cap {
        return Err(MetricsError::DimensionCap { dim: a.dim, cap });
    }
    require_samples(a, 2)?;
    require_samples(b, 2)?;
    let (mu_a, mu_b) = (a.mean(), b.mean());
    let (cov_a, cov_b) = (a.covariance(&mu_a), b.covariance(&mu_b));

    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), and the
    // inner product is symmetric positive semidefinite.
    let eig_a = clamped_eigen(cov_a.clone())?;
    let root_vals = DMatrix::from_diagonal(&eig_a.eigenvalues.map(f64::sqrt));
    let root_a = &eig_a.eigenvectors * root_vals * eig_a.eigenvectors.transpose();
    let inner = &root_a * &cov_b * &root_a;
    let cross: f64 = clamped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();

    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median Euclidean distance over all pairs of the pooled sets.
pub fn median_bandwidth(a: &EmbeddingSet, b: &EmbeddingSet) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.vectors.iter().chain(&b.vectors).collect();
    let mut dists: Vec<f64> = (0..pooled.len())
        .flat_map(|i| ((i + 1)..pooled.len()).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(pooled[i], pooled[j]).sqrt())
        .collect();
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        (dists[n / 2 - 1] + dists[n / 2]) / 2.0
    }
}

/// Row-parallel kernel sum with a fixed summation order.
fn kernel_sum(x: &EmbeddingSet, y: &EmbeddingSet, gamma: f64, skip_diagonal: bool) -> f64 {
    let rows: Vec<f64> = x
        .vectors
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            y.vectors
                .iter()
                .enumerate()
                .filter(|(j, _)| !(skip_diagonal && i == *j))
                .map(|(_, yj)| (-gamma * sq_dist(xi, yj)).exp())
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Reported value, never negative.
    pub value: f64,
    /// Estimator output before clamping.
    pub raw: f64,
    pub clamped: bool,
    pub bandwidth: f64,
}

fn mmd_inputs(a: &EmbeddingSet, b: &EmbeddingSet, bandwidth: Option<f64>) -> Result<f64, MetricsError> {
    same_dim(a, b)?;
    require_samples(a, 2)?;
    require_samples(b, 2)?;
    let sigma = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MetricsError::ZeroBandwidth);
    }
    Ok(sigma)
}

/// Unbiased squared MMD with kernel `exp(-|x-y|^2 / (2 sigma^2))`. The
/// bandwidth defaults to the pooled median pairwise distance.
pub fn rbf_mmd(a: &EmbeddingSet, b: &EmbeddingSet, bandwidth: Option<f64>) -> Result<MmdEstimate, MetricsError> {
    let sigma = mmd_inputs(a, b, bandwidth)?;
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let (m, n) = (a.len() as f64, b.len() as f64);
    let raw = kernel_sum(a, a, gamma, true) / (m * (m - 1.0)) + kernel_sum(b, b, gamma, true) / (n * (n - 1.0))
        - 2.0 * kernel_sum(a, b, gamma, false) / (m * n);
    Ok(MmdEstimate { value: raw.max(0.0), raw, clamped: raw < 0.0, bandwidth: sigma })
}

/// Biased (V-statistic) squared MMD; never negative up to rounding.
pub fn rbf_mmd_biased(a: &EmbeddingSet, b: &EmbeddingSet, bandwidth: Option<f64>) -> Result<MmdEstimate, MetricsError> {
    let sigma = mmd_inputs(a, b, bandwidth)?;
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let (m, n) = (a.len() as f64, b.len() as f64);
    let raw = kernel_sum(a, a, gamma, false) / (m * m) + kernel_sum(b, b, gamma, false) / (n * n)
        - 2.0 * kernel_sum(a, b, gamma, false) / (m * n);
    Ok(MmdEstimate { value: raw.max(0.0), raw, clamped: raw < 0.0, bandwidth: sigma })
}

/// Mean cosine similarity over index-aligned pairs.
pub fn mean_cosine(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricsError> {
    same_dim(a, b)?;
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (index, (x, y)) in a.vectors.iter().zip(&b.vectors).enumerate() {
        let (nx, ny) = (norm(x), norm(y));
        if nx == 0.0 || ny == 0.0 {
            return Err(MetricsError::ZeroVector { index });
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        total += (dot / (nx * ny)).clamp(-1.0, 1.0);
    }
    Ok(total / a.len() as f64)
}

/// Traces that count toward rates: the source was classified correctly and
/// the run did not fail.
fn counted(traces: &[RunTrace]) -> impl Iterator<Item = &RunTrace> {
    traces.iter().filter(|t| t.is_valid())
}

/// Flipped runs over counted runs.
pub fn success_rate(traces: &[RunTrace]) -> Result<Ratio<u64>, MetricsError> {
    let total = counted(traces).count() as u64;
    if total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(Ratio::new(counted(traces).filter(|t| t.flipped).count() as u64, total))
}

/// Mean steps to flip over flipped runs.
pub fn avg_edits(traces: &[RunTrace]) -> Result<Ratio<u64>, MetricsError> {
    let steps: Vec<u64> = counted(traces).filter_map(|t| t.steps_to_flip.map(|s| s as u64)).collect();
    if steps.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(Ratio::new(steps.iter().sum(), steps.len() as u64))
}

/// Mean executed steps over all counted runs.
pub fn avg_edits_all(traces: &[RunTrace]) -> Result<Ratio<u64>, MetricsError> {
    let steps: Vec<u64> = counted(traces).map(|t| t.steps.len() as u64).collect();
    if steps.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(Ratio::new(steps.iter().sum(), steps.len() as u64))
}

/// Mean over vote sets of the share taken by the most common answer.
/// Abstentions count as answers of their own.
pub fn stability(vote_sets: &[Vec<String>]) -> Result<Ratio<u64>, MetricsError> {
    let sets: Vec<&Vec<String>> = vote_sets.iter().filter(|s| !s.is_empty()).collect();
    if sets.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sum = Ratio::from_integer(0u64);
    for set in &sets {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for v in *set {
            *counts.entry(v.as_str()).or_default() += 1;
        }
        sum += Ratio::new(counts.values().copied().max().unwrap_or(0), set.len() as u64);
    }
    Ok(sum / sets.len() as u64)
}

fn vote_answer(vote: &Vote, labels: &[String]) -> String {
    match vote.choice(labels) {
        Some(l) => l,
        None => match vote {
            Vote::Abstain(raw) => format!("abstain:{}", raw.trim().to_lowercase()),
            _ => "abstain".into(),
        },
    }
}

/// Every classification's votes in the traces, step 0 included.
pub fn trace_vote_sets(traces: &[RunTrace]) -> Vec<Vec<String>> {
    let mut sets = Vec::new();
    for trace in traces {
        let labels: Vec<String> = std::iter::once(trace.source.label.clone()).chain(trace.target_label.clone()).collect();
        let classifications = trace.source_check.iter().chain(trace.steps.iter().map(|s| &s.classification));
        for c in classifications {
            sets.push(c.votes.iter().map(|v| vote_answer(v, &labels)).collect());
        }
    }
    sets
}

/// Mean ambiguity at each step index (0 is the source check).
pub fn ambiguity_by_step(traces: &[RunTrace]) -> BTreeMap<usize, (f64, usize)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut add = |step: usize, c: &Classification| {
        let e = acc.entry(step).or_default();
        e.0 += c.ambiguity;
        e.1 += 1;
    };
    for trace in traces {
        if let Some(c) = &trace.source_check {
            add(0, c);
        }
        for s in &trace.steps {
            add(s.index, &s.classification);
        }
    }
    acc.into_iter().map(|(k, (sum, n))| (k, (sum / n as f64, n))).collect()
}

/// Counts of runs by outcome.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub runs: usize,
    pub flipped: usize,
    pub exhausted: usize,
    pub misclassified: usize,
    pub failed: usize,
}

pub fn outcome_counts(traces: &[RunTrace]) -> OutcomeCounts {
    let mut c = OutcomeCounts { runs: traces.len(), ..Default::default() };
    for t in traces {
        match t.outcome {
            Outcome::Flipped => c.flipped += 1,
            Outcome::Exhausted => c.exhausted += 1,
            Outcome::SourceMisclassified { .. } => c.misclassified += 1,
            Outcome::Failed { .. } => c.failed += 1,
        }
    }
    c
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub classifier_tag: String,
    pub strategy: String,
    pub fid: Option<f64>,
    pub cmmd: Option<f64>,
    pub s3: Option<f64>,
    pub success_rate: Option<f64>,
    pub avg_edits_flipped: Option<f64>,
    pub avg_edits_all: Option<f64>,
    pub stability: Option<f64>,
    #[serde(flatten)]
    pub counts: OutcomeCounts,
}

impl ReportRow {
    /// Run aggregates from traces; distribution metrics are left empty.
    pub fn from_traces(classifier_tag: &str, strategy: &str, traces: &[RunTrace]) -> Self {
        Self {
            classifier_tag: classifier_tag.to_string(),
            strategy: strategy.to_string(),
            fid: None,
            cmmd: None,
            s3: None,
            success_rate: success_rate(traces).ok().map(ratio_f64),
            avg_edits_flipped: avg_edits(traces).ok().map(ratio_f64),
            avg_edits_all: avg_edits_all(traces).ok().map(ratio_f64),
            stability: stability(&trace_vote_sets(traces)).ok().map(ratio_f64),
            counts: outcome_counts(traces),
        }
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned text table; SR is shown as a percentage.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = ["classifier", "strategy", "FID", "CMMD", "S3", "SR(%)", "Avg|E|", "Avg|E|all", "stability", "runs"];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.classifier_tag.clone(),
                r.strategy.clone(),
                cell(r.fid, 3),
                cell(r.cmmd, 4),
                cell(r.s3, 4),
                cell(r.success_rate.map(|x| x * 100.0), 2),
                cell(r.avg_edits_flipped, 2),
                cell(r.avg_edits_all, 2),
                cell(r.stability, 4),
                r.counts.runs.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::new("t", rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_sets() {
        assert_eq!(EmbeddingSet::new("t", vec![]), Err(MetricsError::EmptyInput));
        assert!(matches!(EmbeddingSet::new("t", vec![vec![1.0], vec![1.0, 2.0]]), Err(MetricsError::DimensionMismatch { row: 1, .. })));
        assert!(matches!(EmbeddingSet::new("t", vec![vec![f64::NAN]]), Err(MetricsError::NonFinite { row: 0 })));
    }

    #[test]
    fn file_round_trip() {
        let s = set(&[&[0.5, -1.0], &[1e-9, 3.25]]);
        let text = s.to_text();
        assert!(text.starts_with("{\"dim\":2,\"count\":2,\"tag\":\"t\"}\n"));
        assert_eq!(EmbeddingSet::parse(&text).unwrap(), s);
        assert!(EmbeddingSet::parse("{\"dim\":2,\"count\":3,\"tag\":\"t\"}\n1 2\n").is_err());
        assert!(EmbeddingSet::parse("{\"dim\":2,\"count\":1,\"tag\":\"t\"}\n1 x\n").is_err());
        assert!(EmbeddingSet::parse("").is_err());
    }

    #[test]
    fn univariate_closed_form() {
        // unbiased variance of {-h, h} with h = 1/sqrt(2) is 1
        let h = 0.5f64.sqrt();
        let a = set(&[&[-h], &[h]]);
        let b = set(&[&[1.0 - h], &[1.0 + h]]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        // (mu difference)^2 + (sigma difference)^2 with sigma 1 and 3
        let c = set(&[&[-3.0 * h], &[3.0 * h]]);
        assert!((frechet_distance(&a, &c).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples_and_dimension_cap() {
        let a = set(&[&[1.0, 2.0]]);
        assert!(matches!(frechet_distance(&a, &a), Err(MetricsError::TooFewSamples { .. })));
        let b = set(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(frechet_distance_capped(&b, &b, 1), Err(MetricsError::DimensionCap { .. })));
    }

    #[test]
    fn mmd_point_masses() {
        let a = set(&[&[0.0], &[0.0]]);
        let b = set(&[&[100.0], &[100.0]]);
        let est = rbf_mmd(&a, &b, Some(1.0)).unwrap();
        assert!((est.value - 2.0).abs() < 1e-12);
        assert!(matches!(rbf_mmd(&a, &a, None), Err(MetricsError::ZeroBandwidth)));
    }

    #[test]
    fn mmd_identical_sets() {
        let a = set(&[&[0.0, 1.0], &[2.0, 0.5], &[1.0, 1.0]]);
        let biased = rbf_mmd_biased(&a, &a, None).unwrap();
        assert!(biased.value.abs() < 1e-12);
        let unbiased = rbf_mmd(&a, &a, None).unwrap();
        assert_eq!(unbiased.value, 0.0);
        assert!(unbiased.raw <= 0.0);
        assert!(unbiased.clamped);
    }

    #[test]
    fn mmd_biased_is_duplication_invariant() {
        let a = set(&[&[0.0, 1.0], &[2.0, 0.5], &[1.0, 1.0]]);
        let b = set(&[&[1.0, 0.0], &[0.5, -1.0]]);
        let double = |s: &EmbeddingSet| {
            let mut v = s.vectors.clone();
            v.extend(s.vectors.clone());
            EmbeddingSet::new("d", v).unwrap()
        };
        let x = rbf_mmd_biased(&a, &b, Some(1.3)).unwrap().value;
        let y = rbf_mmd_biased(&double(&a), &double(&b), Some(1.3)).unwrap().value;
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn median_bandwidth_of_a_line() {
        let a = set(&[&[0.0], &[1.0]]);
        let b = set(&[&[3.0], &[4.0]]);
        // distances 1,3,4,2,3,1 -> sorted 1,1,2,3,3,4 -> median 2.5
        assert_eq!(median_bandwidth(&a, &b), 2.5);
    }

    #[test]
    fn cosine_cases() {
        let a = set(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = set(&[&[2.0, 0.0], &[0.0, 3.0]]);
        assert!((mean_cosine(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((mean_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(mean_cosine(&a, &set(&[&[1.0, 0.0]])), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(mean_cosine(&a, &set(&[&[0.0, 0.0], &[1.0, 1.0]])), Err(MetricsError::ZeroVector { index: 0 })));
    }

    #[test]
    fn stability_counts_majority_shares() {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(stability(&[s(&["a"; 7]), s(&["b"; 7])]).unwrap(), Ratio::from_integer(1));
        let mixed = s(&["a", "a", "a", "a", "b", "b", "b"]);
        assert_eq!(stability(&[s(&["a"; 7]), mixed]).unwrap(), Ratio::new(11, 14));
        assert_eq!(stability(&[]), Err(MetricsError::EmptyInput));
    }

    fn cloud() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..10)
    }

    proptest! {
        #[test]
        fn frechet_symmetric_and_permutation_invariant(a in cloud(), b in cloud(), rot in 0usize..10) {
            let sa = EmbeddingSet::new("a", a.clone()).unwrap();
            let sb = EmbeddingSet::new("b", b).unwrap();
            let ab = frechet_distance(&sa, &sb).unwrap();
            let ba = frechet_distance(&sb, &sa).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
            let mut shuffled = a;
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let sa2 = EmbeddingSet::new("a", shuffled).unwrap();
            prop_assert!((frechet_distance(&sa2, &sb).unwrap() - ab).abs() <= 1e-6 * ab.max(1.0));
            prop_assert!(frechet_distance(&sa, &sa).unwrap().abs() < 1e-8 * ab.max(1.0) + 1e-8);
        }

        #[test]
        fn frechet_orthogonal_invariance(a in cloud(), b in cloud(), theta in 0.0f64..std::f64::consts::TAU) {
            let (c, s) = (theta.cos(), theta.sin());
            let rotate = |v: &Vec<Vec<f64>>| v.iter().map(|x| vec![c * x[0] - s * x[1], s * x[0] + c * x[1], -x[2]]).collect::<Vec<_>>();
            let (sa, sb) = (EmbeddingSet::new("a", a.clone()).unwrap(), EmbeddingSet::new("b", b.clone()).unwrap());
            let (ra, rb) = (EmbeddingSet::new("a", rotate(&a)).unwrap(), EmbeddingSet::new("b", rotate(&b)).unwrap());
            let d = frechet_distance(&sa, &sb).unwrap();
            prop_assert!((frechet_distance(&ra, &rb).unwrap() - d).abs() <= 1e-6 * d.max(1.0));
        }

        #[test]
        fn mmd_symmetric(a in cloud(), b in cloud()) {
            let (sa, sb) = (EmbeddingSet::new("a", a).unwrap(), EmbeddingSet::new("b", b).unwrap());
            let x = rbf_mmd(&sa, &sb, Some(2.0)).unwrap().raw;
            let y = rbf_mmd(&sb, &sa, Some(2.0)).unwrap().raw;
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
