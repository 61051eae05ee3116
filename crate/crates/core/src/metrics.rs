//! Point-wise and ranking metrics, Kendall's tau-b and RMSE.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("tau is undefined: one of the inputs is constant")]
    AllTied,
    #[error("relevance must be 0 or 1, got {0}")]
    NonBinary(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Precision, recall and F1 of binary decisions. Undefined ratios are 0.
pub fn precision_recall_f1(decisions: &[u8], labels: &[u8]) -> Result<PrecisionRecallF1, MetricsError> {
    if decisions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(decisions.len(), labels.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PrecisionRecallF1 { precision, recall, f1, tp, fp, fn_ })
}

/// A question's candidates in ranked order with binary relevance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub relevance: Vec<u8>,
}

impl RankedList {
    pub fn new(qid: impl Into<String>, relevance: Vec<u8>) -> Result<Self, MetricsError> {
        if let Some(&bad) = relevance.iter().find(|&&r| r > 1) {
            return Err(MetricsError::NonBinary(bad));
        }
        Ok(Self { qid: qid.into(), relevance })
    }

    /// Orders `(score, relevance)` pairs by score descending; equal scores
    /// keep their input order.
    pub fn from_scored(qid: impl Into<String>, scored: &[(f64, u8)]) -> Result<Self, MetricsError> {
        let mut idx: Vec<usize> = (0..scored.len()).collect();
        idx.sort_by(|&i, &j| scored[j].0.total_cmp(&scored[i].0).then(i.cmp(&j)));
        Self::new(qid, idx.into_iter().map(|i| scored[i].1).collect())
    }

    pub fn has_relevant(&self) -> bool {
        self.relevance.contains(&1)
    }

    pub fn has_irrelevant(&self) -> bool {
        self.relevance.contains(&0)
    }
}

pub fn p_at_1(list: &RankedList) -> f64 {
    list.relevance.first().map_or(0.0, |&r| f64::from(r))
}

/// Mean of precision@k over the relevant positions k; 0 when nothing is
/// relevant.
pub fn average_precision(list: &RankedList) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in list.relevance.iter().enumerate() {
        if r == 1 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// 1 / rank of the first relevant candidate; 0 when nothing is relevant.
pub fn reciprocal_rank(list: &RankedList) -> f64 {
    list.relevance.iter().position(|&r| r == 1).map_or(0.0, |k| 1.0 / (k + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Precision,
    Recall,
    F1,
    #[serde(rename = "p@1")]
    PAt1,
    Map,
    Mrr,
    KendallTau,
    Rmse,
}

impl MetricName {
    pub fn label(self) -> &'static str {
        match self {
            MetricName::Precision => "P",
            MetricName::Recall => "R",
            MetricName::F1 => "F1",
            MetricName::PAt1 => "P@1",
            MetricName::Map => "MAP",
            MetricName::Mrr => "MRR",
            MetricName::KendallTau => "tau",
            MetricName::Rmse => "RMSE",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportExtras {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concordant: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discordant: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    /// Standard deviation of the absolute per-item errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: MetricName,
    pub value: f64,
    pub per_question: Vec<f64>,
    pub n: usize,
    #[serde(default)]
    pub extras: ReportExtras,
}

impl MetricReport {
    /// Mean of `per_question`, 0 for an empty list.
    pub fn mean(name: MetricName, per_question: Vec<f64>) -> Self {
        let n = per_question.len();
        let value = if n == 0 { 0.0 } else { per_question.iter().sum::<f64>() / n as f64 };
        Self { name, value, per_question, n, extras: ReportExtras::default() }
    }

    pub fn text_line(&self) -> String {
        let mut line = format!("{:<6} {:>8.4}  n={}", self.name.label(), self.value, self.n);
        let e = &self.extras;
        if let Some(p) = e.p_value {
            let _ = write!(line, "  p={p:.4}");
        }
        if let (Some(r), Some(s)) = (e.rmse, e.sigma) {
            let _ = write!(line, "  rmse={r:.4}±{s:.4}");
        }
        line
    }
}

pub fn mean_p_at_1(lists: &[RankedList]) -> MetricReport {
    MetricReport::mean(MetricName::PAt1, lists.iter().map(p_at_1).collect())
}

pub fn mean_average_precision(lists: &[RankedList]) -> MetricReport {
    MetricReport::mean(MetricName::Map, lists.iter().map(average_precision).collect())
}

pub fn mean_reciprocal_rank(lists: &[RankedList]) -> MetricReport {
    MetricReport::mean(MetricName::Mrr, lists.iter().map(reciprocal_rank).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Null distribution of discordant-pair counts over all permutations.
    Exact,
    /// Normal approximation with tie-corrected variance.
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallResult {
    pub tau: f64,
    pub p_value: f64,
    pub concordant: usize,
    pub discordant: usize,
    pub method: PValueMethod,
}

/// Largest n for which the exact p-value is used when there are no ties.
pub const EXACT_P_MAX_N: usize = 33;

/// Number of pairs inside groups of equal consecutive values of a sorted
/// sequence, with the two extra moments the normal-approximation variance
/// needs.
fn tie_sums<T: PartialEq>(sorted: &[T]) -> (u64, f64, f64) {
    let (mut pairs, mut v1, mut v2) = (0u64, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        if t > 1 {
            pairs += t * (t - 1) / 2;
            let tf = t as f64;
            v1 += tf * (tf - 1.0) * (2.0 * tf + 5.0);
            v2 += tf * (tf - 1.0) * (tf - 2.0);
        }
        i = j;
    }
    (pairs, v1, v2)
}

/// Merge sort counting strict inversions.
fn sort_count_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], &mut buf[..mid]) + sort_count_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Probability that a uniformly random permutation of `n` items has at most
/// `k` inversions.
fn inversion_cdf(n: usize, k: usize) -> f64 {
    let max = n * (n.saturating_sub(1)) / 2;
    let mut dist = vec![1.0];
    for j in 2..=n {
        let len = dist.len() + j - 1;
        let mut next = vec![0.0; len];
        // next[m] = (1/j) * sum_{i<j} dist[m - i], via a sliding window
        let mut window = 0.0;
        for (m, slot) in next.iter_mut().enumerate() {
            if m < dist.len() {
                window += dist[m];
            }
            if m >= j && m - j < dist.len() {
                window -= dist[m - j];
            }
            *slot = window / j as f64;
        }
        dist = next;
    }
    debug_assert_eq!(dist.len(), max + 1);
    dist.iter().take(k + 1).sum()
}

/// Kendall's tau-b of two paired samples with a two-sided p-value.
///
/// Counting uses Knight's O(n log n) sort-and-merge scheme. Without ties and
/// for `n <= EXACT_P_MAX_N` the p-value is exact; otherwise it comes from the
/// normal approximation with tie-corrected variance.
pub fn kendall_tau_b(a: &[f64], h: &[f64]) -> Result<KendallResult, MetricsError> {
    if a.len() != h.len() {
        return Err(MetricsError::LengthMismatch(a.len(), h.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(h[i].total_cmp(&h[j])));
    let a_sorted: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let joint: Vec<(f64, f64)> = idx.iter().map(|&i| (a[i], h[i])).collect();
    let mut h_sorted: Vec<f64> = idx.iter().map(|&i| h[i]).collect();

    let (ties_a, a_v1, a_v2) = tie_sums(&a_sorted);
    let (ties_joint, _, _) = tie_sums(&joint);
    let mut buf = vec![0.0; n];
    let discordant = sort_count_swaps(&mut h_sorted, &mut buf);
    let (ties_h, h_v1, h_v2) = tie_sums(&h_sorted);

    let total = (n * (n - 1) / 2) as u64;
    if ties_a == total || ties_h == total {
        return Err(MetricsError::AllTied);
    }
    let untied = total + ties_joint - ties_a - ties_h;
    let concordant = untied - discordant;
    let s = concordant as f64 - discordant as f64;
    let tau = s / (((total - ties_a) as f64) * ((total - ties_h) as f64)).sqrt();

    let no_ties = ties_a == 0 && ties_h == 0;
    let (p_value, method) = if no_ties && n <= EXACT_P_MAX_N {
        let c = discordant.min(total - discordant) as usize;
        let p = if 2 * c as u64 == total { 1.0 } else { (2.0 * inversion_cdf(n, c)).min(1.0) };
        (p, PValueMethod::Exact)
    } else {
        let nf = n as f64;
        let m = nf * (nf - 1.0);
        let mut var = (m * (2.0 * nf + 5.0) - a_v1 - h_v1) / 18.0 + 2.0 * ties_a as f64 * ties_h as f64 / m;
        if n > 2 {
            var += a_v2 * h_v2 / (9.0 * m * (nf - 2.0));
        }
        let z = s / var.sqrt();
        (statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2), PValueMethod::Normal)
    };

    Ok(KendallResult { tau, p_value, concordant: concordant as usize, discordant: discordant as usize, method })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseResult {
    pub rmse: f64,
    /// Sample standard deviation of `|a_i - h_i|`.
    pub sigma: f64,
}

pub fn rmse(a: &[f64], h: &[f64]) -> Result<RmseResult, MetricsError> {
    if a.len() != h.len() {
        return Err(MetricsError::LengthMismatch(a.len(), h.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let n = a.len() as f64;
    let abs: Vec<f64> = a.iter().zip(h).map(|(x, y)| (x - y).abs()).collect();
    let rmse = (abs.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let sigma = if abs.len() < 2 {
        0.0
    } else {
        let mean = abs.iter().sum::<f64>() / n;
        (abs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RmseResult { rmse, sigma })
}
