//! Classification metrics, ROC/AUC and a k-nearest-neighbour baseline.
//!
//! Confusion matrices are indexed `[predicted][truth]`.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{LabeledSample, CHANNELS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predicted} predictions for {truth} labels")]
    Length { predicted: usize, truth: usize },
    #[error("class {class} outside 0..{classes}")]
    Class { class: usize, classes: usize },
    #[error("k must be in 1..={train}, got {k}")]
    K { k: usize, train: usize },
    #[error("score {index} is not finite")]
    Score { index: usize },
    #[error("AUC undefined with {positives} positives and {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    /// Counts `(predicted, truth)` pairs of 0-based class indices.
    pub fn from_labels(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self, EvalError> {
        if predicted.len() != truth.len() {
            return Err(EvalError::Length { predicted: predicted.len(), truth: truth.len() });
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            for class in [p, t] {
                if class >= classes {
                    return Err(EvalError::Class { class, classes });
                }
            }
            counts[p][t] += 1;
        }
        Ok(Self { counts })
    }

    /// From a square `[predicted][truth]` count table.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let n = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != n) {
            return Err(EvalError::Length { predicted: row.len(), truth: n });
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, predicted: usize, truth: usize) -> u64 {
        self.counts[predicted][truth]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Samples predicted as `class`.
    pub fn predicted_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Samples whose true class is `class`.
    pub fn truth_total(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Zero denominators give 0 and are reported by [`Metrics::flags`].
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| if den > 0 { num as f64 / den as f64 } else { 0.0 };
        let per_class: Vec<ClassMetrics> = (0..self.classes())
            .map(|c| {
                let tp = self.counts[c][c];
                let (predicted, support) = (self.predicted_total(c), self.truth_total(c));
                let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
                let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                    precision_undefined: predicted == 0,
                    recall_undefined: support == 0,
                }
            })
            .collect();
        let mean = |get: fn(&ClassMetrics) -> f64| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(get).sum::<f64>() / per_class.len() as f64
            }
        };
        let correct: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        Metrics {
            accuracy: ratio(correct, self.total()),
            empty: self.total() == 0,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// The class was never predicted; `precision` is 0 by convention.
    pub precision_undefined: bool,
    /// The class never occurs in the truth; `recall` is 0 by convention.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// No samples were counted; `accuracy` is 0 by convention.
    pub empty: bool,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted means over classes, zeros included.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl Metrics {
    /// One note per value that came from a zero denominator.
    pub fn flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.empty {
            out.push("no samples, accuracy set to 0".to_string());
        }
        for (c, m) in self.per_class.iter().enumerate() {
            if m.precision_undefined {
                out.push(format!("class {}: never predicted, precision set to 0", c + 1));
            }
            if m.recall_undefined {
                out.push(format!("class {}: absent from truth, recall set to 0", c + 1));
            }
        }
        out
    }
}

/// One ROC operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// From (0,0) to (1,1), one point per distinct threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve and AUC of `scores` against `positive[i]` labels. Tied scores
/// move both rates in one step.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve, EvalError> {
    let auc = auc(scores, positive)?;
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if positive[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: s, fpr: fp / n, tpr: tp / p });
    }
    Ok(RocCurve { points, auc })
}

/// One-vs-rest curve for 0-based `class` from per-sample score vectors.
pub fn one_vs_rest<const C: usize>(scores: &[[f64; C]], truth: &[usize], class: usize) -> Result<RocCurve, EvalError> {
    if class >= C {
        return Err(EvalError::Class { class, classes: C });
    }
    if scores.len() != truth.len() {
        return Err(EvalError::Length { predicted: scores.len(), truth: truth.len() });
    }
    let column: Vec<f64> = scores.iter().map(|s| s[class]).collect();
    let positive: Vec<bool> = truth.iter().map(|&t| t == class).collect();
    roc_curve(&column, &positive)
}

fn check_scores(scores: &[f64], positive: &[bool]) -> Result<(), EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::Length { predicted: scores.len(), truth: positive.len() });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::Score { index });
    }
    let positives = positive.iter().filter(|&&b| b).count();
    let negatives = positive.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::UndefinedAuc { positives, negatives });
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    check_scores(scores, positive)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += idx[i..j].iter().filter(|&&k| positive[k]).count() as f64 * midrank;
        i = j;
    }
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Writes `threshold,fpr,tpr,log10_fpr`; `log10_fpr` is empty where the
/// rate is zero.
pub fn write_roc_csv<W: Write>(curve: &RocCurve, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "fpr", "tpr", "log10_fpr"])?;
    for p in &curve.points {
        let log = if p.fpr > 0.0 { p.fpr.log10().to_string() } else { String::new() };
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string(), log])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-class table: `class,precision,recall,f1,auc,support`, then a
/// `macro` row and an `accuracy` row. An AUC that could not be computed is
/// left empty, as is the macro AUC when any class lacks one.
pub fn write_report<W: Write>(metrics: &Metrics, auc: &[Option<f64>], out: W) -> Result<(), EvalError> {
    let fmt = |v: f64| format!("{v:.6}");
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "precision", "recall", "f1", "auc", "support"])?;
    for (c, m) in metrics.per_class.iter().enumerate() {
        w.write_record([
            (c + 1).to_string(),
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            opt(auc.get(c).copied().flatten()),
            m.support.to_string(),
        ])?;
    }
    let support: u64 = metrics.per_class.iter().map(|m| m.support).sum();
    let macro_auc: Option<Vec<f64>> = auc.iter().copied().collect();
    let macro_auc = macro_auc.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
    w.write_record([
        "macro".to_string(),
        fmt(metrics.macro_precision),
        fmt(metrics.macro_recall),
        fmt(metrics.macro_f1),
        opt(macro_auc),
        support.to_string(),
    ])?;
    w.write_record(["accuracy".to_string(), fmt(metrics.accuracy), String::new(), String::new(), String::new(), support.to_string()])?;
    w.flush()?;
    Ok(())
}

/// Brute-force Euclidean k-nearest-neighbour classifier.
#[derive(Debug, Clone)]
pub struct Knn {
    train: Vec<LabeledSample>,
    k: usize,
}

impl Knn {
    pub fn new(train: Vec<LabeledSample>, k: usize) -> Result<Self, EvalError> {
        if k == 0 || k > train.len() {
            return Err(EvalError::K { k, train: train.len() });
        }
        Ok(Self { train, k })
    }

    /// Majority label among the `k` nearest training samples; a tied vote
    /// goes to the tied label of the nearest neighbour. Returns 0-based
    /// class indices.
    pub fn predict_one(&self, x: &[f64; CHANNELS]) -> usize {
        let mut d: Vec<(f64, usize)> = self
            .train
            .iter()
            .enumerate()
            .map(|(i, s)| (s.features.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let k = self.k;
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &mut d[..k];
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0usize; crate::dataset::CLASSES];
        for &(_, i) in nearest.iter() {
            votes[self.train[i].label.index()] += 1;
        }
        let top = *votes.iter().max().expect("non-empty");
        nearest
            .iter()
            .map(|&(_, i)| self.train[i].label.index())
            .find(|&c| votes[c] == top)
            .expect("some neighbour holds the top vote")
    }

    pub fn predict(&self, samples: &[LabeledSample]) -> Vec<usize> {
        samples.par_iter().map(|s| self.predict_one(&s.features)).collect()
    }
}
