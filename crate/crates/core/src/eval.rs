//! Metrics: AUC, F1, Hit@k, codebook usage, NMI and SID collisions.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("metric undefined: labels contain a single class")]
    SingleClass,
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(f64),
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

fn check_labels(scores: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(EvalError::InvalidLabel(bad));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic; tied scores count
/// one half per positive–negative pair.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 of the hard predictions `score >= threshold`; 0 when nothing is
/// predicted positive or nothing is correct.
pub fn f1(scores: &[f64], labels: &[f64], threshold: f64) -> Result<f64, EvalError> {
    check_labels(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    // harmonic mean of precision and recall, rounded once
    Ok((2 * tp) as f64 / (2 * tp + fp + fneg) as f64)
}

/// 1 when `target` is among the first `k` entries of `ranked`.
pub fn hit_at_k<T: PartialEq>(ranked: &[T], target: &T, k: usize) -> u8 {
    ranked.iter().take(k).any(|c| c == target) as u8
}

pub fn mean_hit_at_k<T: PartialEq>(cases: &[(Vec<T>, T)], k: usize) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases.iter().map(|(r, t)| hit_at_k(r, t, k) as f64).sum::<f64>() / cases.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    /// `exp(entropy)` of the empirical code distribution, in `[1, K]`.
    pub perplexity: f64,
    /// Fraction of the `K` codes used at least once.
    pub utilization: f64,
}

pub fn codebook_stats(assignments: &[usize], codebook_size: usize) -> Result<CodebookStats, EvalError> {
    if assignments.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = vec![0usize; codebook_size];
    for &a in assignments {
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    let used = counts.iter().filter(|&&c| c > 0).count();
    Ok(CodebookStats {
        perplexity: entropy.exp(),
        utilization: used as f64 / codebook_size as f64,
    })
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `2·I(U;V) / (H(U) + H(V))`. Two constant assignments count as identical
/// (NMI 1). Sums run in label order, so the result is reproducible bit for
/// bit.
pub fn nmi<A: Ord, B: Ord>(a: &[A], b: &[B]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<&A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy_of_counts(ca.values(), n);
    let hb = entropy_of_counts(cb.values(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|((x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[x] as f64 / n;
            let py = cb[y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// `1 − distinct / total`; 0 for an empty list.
pub fn collision_rate<T: Eq + Hash>(sids: &[T]) -> f64 {
    if sids.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<&T> = sids.iter().collect();
    1.0 - distinct.len() as f64 / sids.len() as f64
}

/// Everything `dos eval` reports for one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scheme: String,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    /// Hit rate keyed by cutoff, e.g. `"hit@10"`.
    pub hit_at_k: BTreeMap<String, f64>,
    pub codebook: Vec<CodebookStats>,
    /// NMI of each SID level against the planted label of the same level.
    pub nmi: Vec<f64>,
    pub collision_rate: f64,
    /// Free-form run metadata; the only field allowed to vary between
    /// otherwise identical runs.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(EvalError::SingleClass));
        assert_eq!(auc(&[0.1, 0.2], &[1.0, 2.0]), Err(EvalError::InvalidLabel(2.0)));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0.9, 0.1], &[1.0, 0.0], 0.5).unwrap(), 1.0);
        assert_eq!(f1(&[0.1, 0.2], &[1.0, 0.0], 0.5).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let v = f1(&[0.9, 0.8, 0.7, 0.1, 0.2], &[1.0, 1.0, 0.0, 1.0, 0.0], 0.5).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hit_examples() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(hit_at_k(&ranked, &0, 10), 1);
        assert_eq!(hit_at_k(&ranked, &10, 10), 0);
        assert_eq!(hit_at_k(&ranked, &9, 10), 1);
    }

    #[test]
    fn codebook_examples() {
        let uniform: Vec<usize> = (0..64).collect();
        let s = codebook_stats(&uniform, 64).unwrap();
        assert!((s.perplexity - 64.0).abs() < 1e-9);
        assert_eq!(s.utilization, 1.0);
        assert_eq!(codebook_stats(&[3, 3, 3], 8).unwrap().perplexity, 1.0);
        let s = codebook_stats(&[0, 0, 1, 2], 4).unwrap();
        assert!((s.perplexity - (1.5 * 2f64.ln()).exp()).abs() < 1e-12);
        assert_eq!(s.utilization, 0.75);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[5, 5, 7, 7, 9]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 1, 1], &[3, 3, 3, 3]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn collision_examples() {
        assert_eq!(collision_rate(&[1, 2, 3]), 0.0);
        assert!((collision_rate(&[7; 10]) - 0.9).abs() < 1e-15);
    }
}
