//! Detection metrics with label 1 (hallucinated) as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parallel predicted probabilities and binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::EmptyInput("scored set has no rows".into()));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidInput(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Indices sorted by descending score.
    fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

pub fn accuracy(set: &ScoredSet, threshold: f64) -> f64 {
    let correct = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    correct as f64 / set.len() as f64
}

/// Mann-Whitney estimate of P(score_pos > score_neg) with ties counted half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    let n = set.negatives();
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({p} positive, {n} negative)"
        )));
    }
    // Ascending scan over tie groups, counting negatives strictly below.
    let mut idx = set.ranked();
    idx.reverse();
    let mut neg_below = 0usize;
    let mut concordant = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < idx.len() && set.scores[idx[j]] == s {
            if set.labels[idx[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        concordant += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(concordant / (p as f64 * n as f64))
}

/// Average precision over tie groups: sum of recall increments times precision.
pub fn auprc(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let idx = set.ranked();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        let mut gp = 0;
        while i < idx.len() && set.scores[idx[i]] == s {
            gp += usize::from(set.labels[idx[i]]);
            seen += 1;
            i += 1;
        }
        tp += gp;
        if gp > 0 {
            ap += (gp as f64 / p as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Expected calibration error on the predicted-class confidence, equal-width bins.
pub fn ece(set: &ScoredSet, num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidInput("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        let predicted = s >= 0.5;
        let conf = if predicted { s } else { 1.0 - s };
        let b = ((conf * num_bins as f64) as usize).min(num_bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(predicted == l);
    }
    let n = set.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (conf_sum[b] / c - correct[b] as f64 / c).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(set: &ScoredSet, threshold: f64) -> Self {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&s, &l) in set.scores.iter().zip(&set.labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.fp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
}

/// Precision, recall and false positive rate when flagging `score >= thr`.
pub fn pr_at_threshold(set: &ScoredSet, thr: f64) -> Result<OperatingPoint> {
    let c = Confusion::at(set, thr);
    let precision = c.precision().ok_or_else(|| {
        Error::UndefinedMetric(format!("precision undefined: nothing scored >= {thr}"))
    })?;
    let recall = c
        .recall()
        .ok_or_else(|| Error::UndefinedMetric("recall undefined: no positives".into()))?;
    let fpr = c
        .fpr()
        .ok_or_else(|| Error::UndefinedMetric("FPR undefined: no negatives".into()))?;
    Ok(OperatingPoint {
        precision,
        recall,
        fpr,
    })
}

/// Largest threshold whose recall on `set` reaches `target`.
///
/// Target 1.0 returns 0.0 so that every mention is flagged, on this set and
/// on any other.
pub fn threshold_for_recall(set: &ScoredSet, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "recall target {target} is unattainable; use a value in (0, 1]"
        )));
    }
    let mut pos: Vec<f64> = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() {
        return Err(Error::UndefinedMetric("recall targeting needs a positive".into()));
    }
    if target >= 1.0 {
        return Ok(0.0);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let k = ((target * pos.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(pos[k.min(pos.len()) - 1])
}
