//! Ranking and threshold metrics with FP as the positive class.
//!
//! Scores are anomaly scores: higher means more FP-like. A sample is rejected
//! when its score is strictly greater than the threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataio::Label;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Scores with matching labels and optional FP class tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet<T> {
    scores: Vec<T>,
    labels: Vec<Label>,
    fp_class: Vec<Option<usize>>,
}

impl<T: Real> ScoredSet<T> {
    pub fn new(scores: Vec<T>, labels: Vec<Label>) -> Result<Self> {
        let n = scores.len();
        Self::with_classes(scores, labels, vec![None; n])
    }

    pub fn with_classes(scores: Vec<T>, labels: Vec<Label>, fp_class: Vec<Option<usize>>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != fp_class.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores, {} labels, {} class tags",
                scores.len(),
                labels.len(),
                fp_class.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::InvalidArgument(format!("score {i} is NaN")));
        }
        Ok(Self {
            scores,
            labels,
            fp_class,
        })
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn fp_class(&self) -> &[Option<usize>] {
        &self.fp_class
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_fp()).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn has_both_labels(&self) -> bool {
        self.positives() > 0 && self.negatives() > 0
    }

    fn require_both(&self, what: &str) -> Result<()> {
        if self.has_both_labels() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} needs both TP and FP samples ({} FP, {} TP)",
                self.positives(),
                self.negatives()
            )))
        }
    }

    /// Groups of tied scores in descending order: `(score, positives, count)`.
    fn descending_groups(&self) -> Vec<(T, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut groups: Vec<(T, usize, usize)> = Vec::new();
        for i in idx {
            let pos = usize::from(self.labels[i].is_fp());
            match groups.last_mut() {
                Some(g) if g.0 == self.scores[i] => {
                    g.1 += pos;
                    g.2 += 1;
                }
                _ => groups.push((self.scores[i], pos, 1)),
            }
        }
        groups
    }
}

/// `sum_k (R_k - R_{k-1}) P_k` over descending distinct thresholds.
pub fn average_precision<T: Real>(set: &ScoredSet<T>) -> Result<f64> {
    set.require_both("average precision")?;
    let total_pos = set.positives() as f64;
    let (mut tp, mut pred) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, pos, count) in set.descending_groups() {
        tp += pos;
        pred += count;
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / pred as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Probability that a random FP outscores a random TP, ties counting one half.
pub fn roc_auc<T: Real>(set: &ScoredSet<T>) -> Result<f64> {
    set.require_both("ROC AUC")?;
    let (n_pos, n_neg) = (set.positives() as f64, set.negatives() as f64);
    // Walk ascending; every TP below a FP is a win, ties are half wins.
    let mut groups = set.descending_groups();
    groups.reverse();
    let mut neg_below = 0.0;
    let mut wins = 0.0;
    for (_, pos, count) in groups {
        let neg = (count - pos) as f64;
        wins += pos as f64 * (neg_below + 0.5 * neg);
        neg_below += neg;
    }
    Ok(wins / (n_pos * n_neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    /// Reject when `score > threshold`.
    pub threshold: f64,
    pub f1: f64,
}

/// Scans every PR operating point and returns the cut with maximal F1. Cuts sit
/// halfway between adjacent distinct scores; the all-reject cut sits one unit
/// below the lowest score. Ties go to the higher threshold.
pub fn select_threshold_f1<T: Real>(set: &ScoredSet<T>) -> Result<ThresholdChoice> {
    set.require_both("threshold selection")?;
    let total_pos = set.positives();
    let groups = set.descending_groups();
    let (mut tp, mut pred) = (0usize, 0usize);
    let mut best: Option<ThresholdChoice> = None;
    for (k, &(score, pos, count)) in groups.iter().enumerate() {
        tp += pos;
        pred += count;
        let f1 = 2.0 * tp as f64 / (pred + total_pos) as f64;
        let threshold = match groups.get(k + 1) {
            Some(&(next, _, _)) => midpoint(score.as_f64(), next.as_f64()),
            None => score.as_f64() - 1.0,
        };
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(ThresholdChoice { threshold, f1 });
        }
    }
    Ok(best.expect("non-empty set"))
}

fn midpoint(hi: f64, lo: f64) -> f64 {
    // Keep the cut finite and strictly between the two scores.
    match (hi.is_finite(), lo.is_finite()) {
        (true, true) => lo + (hi - lo) / 2.0,
        (false, true) => lo + lo.abs().max(1.0),
        (true, false) => hi - hi.abs().max(1.0),
        (false, false) => 0.0,
    }
}

/// Threshold-dependent metrics; `None` marks an undefined ratio (zero
/// denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_metrics<T: Real>(set: &ScoredSet<T>, threshold: f64) -> Result<Confusion> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold must be finite, got {threshold}")));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (s, l) in set.scores.iter().zip(&set.labels) {
        let reject = s.as_f64() > threshold;
        match (l.is_fp(), reject) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fneg += 1,
        }
    }
    Ok(Confusion {
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fneg,
        accuracy: ratio(tp + tn, set.len()),
        precision: ratio(tp, tp + fp),
        sensitivity: ratio(tp, tp + fneg),
        specificity: ratio(tn, tn + fp),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Reject when `score >= threshold`.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Reject when `score >= threshold`; the first point lies above every score.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One point per distinct score, thresholds descending, recall non-decreasing.
pub fn pr_curve<T: Real>(set: &ScoredSet<T>) -> Result<Vec<PrPoint>> {
    set.require_both("PR curve")?;
    let total_pos = set.positives() as f64;
    let (mut tp, mut pred) = (0usize, 0usize);
    Ok(set
        .descending_groups()
        .into_iter()
        .map(|(score, pos, count)| {
            tp += pos;
            pred += count;
            PrPoint {
                threshold: score.as_f64(),
                precision: tp as f64 / pred as f64,
                recall: tp as f64 / total_pos,
            }
        })
        .collect())
}

/// ROC points from `(0, 0)` to `(1, 1)`, both rates non-decreasing.
pub fn roc_curve<T: Real>(set: &ScoredSet<T>) -> Result<Vec<RocPoint>> {
    set.require_both("ROC curve")?;
    let (n_pos, n_neg) = (set.positives() as f64, set.negatives() as f64);
    let groups = set.descending_groups();
    let top = groups[0].0.as_f64();
    let mut out = vec![RocPoint {
        threshold: if top.is_finite() { top + 1.0 } else { top },
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (score, pos, count) in groups {
        tp += pos;
        fp += count - pos;
        out.push(RocPoint {
            threshold: score.as_f64(),
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
        });
    }
    Ok(out)
}

/// Per-label counts of scores over equal-width bins spanning the finite scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub tp_counts: Vec<usize>,
    pub fp_counts: Vec<usize>,
    /// Non-finite scores (flagged samples), per label `[TP, FP]`.
    pub non_finite: [usize; 2],
}

pub fn score_histogram<T: Real>(set: &ScoredSet<T>, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let finite: Vec<f64> = set.scores.iter().map(|s| s.as_f64()).filter(|s| s.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if finite.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut h = Histogram {
        edges,
        tp_counts: vec![0; bins],
        fp_counts: vec![0; bins],
        non_finite: [0, 0],
    };
    for (s, l) in set.scores.iter().zip(&set.labels) {
        let v = s.as_f64();
        if !v.is_finite() {
            h.non_finite[usize::from(l.is_fp())] += 1;
            continue;
        }
        let k = (((v - lo) / width) as usize).min(bins - 1);
        if l.is_fp() {
            h.fp_counts[k] += 1;
        } else {
            h.tp_counts[k] += 1;
        }
    }
    h
}
