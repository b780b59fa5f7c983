//! Evaluation statistics: inter-rater agreement, feature-set overlap,
//! (balanced) accuracy, percentile bootstrap intervals and the Wilcoxon
//! signed-rank test.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::MetricsError;

/// Largest number of nonzero differences for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX_N: usize = 20;
pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Items × raters matrix of binary labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    rows: Vec<Vec<u8>>,
}

impl LabelMatrix {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, MetricsError> {
        if rows.len() < 2 || rows[0].len() < 2 {
            return Err(MetricsError::MatrixTooSmall);
        }
        let raters = rows[0].len();
        if rows.iter().any(|r| r.len() != raters || r.iter().any(|v| *v > 1)) {
            return Err(MetricsError::MatrixInvalid);
        }
        Ok(Self { rows })
    }

    /// Builds the matrix from one label vector per rater.
    pub fn from_raters(raters: &[Vec<u8>]) -> Result<Self, MetricsError> {
        if raters.len() < 2 {
            return Err(MetricsError::MatrixTooSmall);
        }
        let items = raters[0].len();
        if raters.iter().any(|r| r.len() != items) {
            return Err(MetricsError::MatrixInvalid);
        }
        Self::new((0..items).map(|i| raters.iter().map(|r| r[i]).collect()).collect())
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn raters(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Set when every rating fell in one category; the value is then 1 by convention.
    pub degenerate: bool,
}

pub fn fleiss_kappa(m: &LabelMatrix) -> Result<Kappa, MetricsError> {
    let n = m.raters() as f64;
    let items = m.items() as f64;
    let mut ones_total = 0.0;
    let mut agreement = 0.0;
    for row in m.rows() {
        let ones = row.iter().filter(|v| **v == 1).count() as f64;
        let zeros = n - ones;
        ones_total += ones;
        agreement += (ones * ones + zeros * zeros - n) / (n * (n - 1.0));
    }
    let observed = agreement / items;
    let p1 = ones_total / (items * n);
    let expected = p1 * p1 + (1.0 - p1) * (1.0 - p1);
    if expected >= 1.0 {
        return if observed >= 1.0 {
            Ok(Kappa { value: 1.0, degenerate: true })
        } else {
            Err(MetricsError::DegenerateMarginals { observed })
        };
    }
    Ok(Kappa {
        value: (observed - expected) / (1.0 - expected),
        degenerate: false,
    })
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub mean: f64,
    /// One entry per unordered pair, in participant-id order.
    pub pairs: Vec<(String, String, f64)>,
    /// Pairs where both sets were empty (scored 1).
    pub empty_pairs: usize,
}

pub fn jaccard_mean(sets: &BTreeMap<String, BTreeSet<String>>) -> Result<JaccardReport, MetricsError> {
    if sets.len() < 2 {
        return Err(MetricsError::TooFewParticipants);
    }
    let entries: Vec<_> = sets.iter().collect();
    let mut pairs = Vec::new();
    let mut empty_pairs = 0;
    for (i, (pa, a)) in entries.iter().enumerate() {
        for (pb, b) in &entries[i + 1..] {
            if a.is_empty() && b.is_empty() {
                empty_pairs += 1;
            }
            pairs.push((pa.to_string(), pb.to_string(), jaccard(a, b)));
        }
    }
    let mean = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
    Ok(JaccardReport { mean, pairs, empty_pairs })
}

pub fn accuracy(y_true: &[u8], y_pred: &[u8]) -> Result<f64, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(y_true: &[u8], y_pred: &[u8]) -> Result<f64, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut total = [0usize; 2];
    let mut hit = [0usize; 2];
    for (t, p) in y_true.iter().zip(y_pred) {
        let c = usize::from(*t != 0);
        total[c] += 1;
        if (*p != 0) == (*t != 0) {
            hit[c] += 1;
        }
    }
    if total[0] == 0 || total[1] == 0 {
        return Err(MetricsError::SingleClassTruth);
    }
    Ok((hit[0] as f64 / total[0] as f64 + hit[1] as f64 / total[1] as f64) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
}

impl BootstrapCi {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resample means in resample order. Resample `r` draws from its own ChaCha
/// stream, so the result does not depend on evaluation order.
pub fn bootstrap_means(samples: &[f64], n_resamples: usize, seed: u64) -> Vec<f64> {
    let n = samples.len();
    (0..n_resamples)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect()
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(samples: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi, MetricsError> {
    if samples.is_empty() || n_resamples == 0 {
        return Err(MetricsError::Empty);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::BadLevel(level));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut means = bootstrap_means(samples, n_resamples, seed);
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        lo: quantile(&means, alpha),
        hi: quantile(&means, 1.0 - alpha),
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W−).
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on `a − b`. Zero differences are dropped.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, MetricsError> {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(if pairs.is_empty() { MetricsError::Empty } else { MetricsError::AllZeroDifferences });
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_p(&ranks, w_plus), true)
    } else {
        let mean = total / 2.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        ((2.0 * (1.0 - normal.cdf(z))).min(1.0), false)
    };

    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        p_value,
        n_effective: n,
        exact,
    })
}

/// Exact two-sided p from the null distribution of W+ (each rank signed
/// positive with probability 1/2). Ranks are doubled so ties stay integral.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in &doubled {
        for s in (*r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (w_plus * 2.0).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let below: u64 = counts[..=observed].iter().sum();
    let above: u64 = counts[observed..].iter().sum();
    (2.0 * below.min(above) as f64 / all).min(1.0)
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub group: String,
    pub mean: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub p: Option<f64>,
}

/// Tab-separated table with a header row.
pub fn write_report<W: std::io::Write>(w: W, rows: &[ReportRow]) -> Result<(), csv::Error> {
    let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
