//! Confusion-matrix rates, ROC/AUROC and fold aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("AUROC needs both classes (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(s));
    }
    Ok(())
}

/// A sample is predicted positive when `score >= threshold`.
pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Sensitivity (TPR), specificity (TNR) and accuracy; a ratio with a zero
/// denominator is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn rates(cm: &ConfusionMatrix) -> Result<Rates> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(Rates {
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
    })
}

/// ROC points from a descending threshold sweep, one point per distinct score,
/// from `(0, 0)` to `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        let mut area = 0.0;
        for k in 1..self.fpr.len() {
            area += (self.fpr[k] - self.fpr[k - 1]) * (self.tpr[k] + self.tpr[k - 1]) / 2.0;
        }
        area
    }
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    Ok((pos, neg))
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        // tied scores move the threshold past all of them at once
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }
    Ok(RocCurve { fpr, tpr })
}

/// Area under the ROC curve by the trapezoidal rule.
///
/// Ties are swept as one threshold step, so the area equals the fraction of
/// positive/negative pairs ranked correctly with ties counted one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.area())
}

/// Metrics of one fold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub confusion: ConfusionMatrix,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
    pub auroc: Option<f64>,
}

pub fn fold_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<FoldMetrics> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let confusion = confusion_at(scores, labels, threshold)?;
    let r = rates(&confusion)?;
    let auroc = match auroc(scores, labels) {
        Ok(a) => Some(a),
        Err(MetricsError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(FoldMetrics {
        confusion,
        sensitivity: r.sensitivity,
        specificity: r.specificity,
        accuracy: r.accuracy,
        auroc,
    })
}

/// Mean and standard deviation over the folds where a metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
    /// Folds where the metric was undefined and therefore left out.
    pub excluded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    Population,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: Option<Summary>,
    pub specificity: Option<Summary>,
    pub accuracy: Summary,
    pub auroc: Option<Summary>,
    pub std_kind: StdKind,
}

fn summarize(values: &[Option<f64>], kind: StdKind) -> Option<Summary> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return None;
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let ss = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let std = match kind {
        StdKind::Population => (ss / n).sqrt(),
        StdKind::Sample if present.len() > 1 => (ss / (n - 1.0)).sqrt(),
        StdKind::Sample => 0.0,
    };
    Some(Summary {
        mean,
        std,
        folds: present.len(),
        excluded: values.len() - present.len(),
    })
}

pub fn aggregate_folds(folds: &[FoldMetrics], kind: StdKind) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let col = |f: fn(&FoldMetrics) -> Option<f64>| folds.iter().map(f).collect::<Vec<_>>();
    Ok(MetricsReport {
        sensitivity: summarize(&col(|m| m.sensitivity), kind),
        specificity: summarize(&col(|m| m.specificity), kind),
        accuracy: summarize(&col(|m| Some(m.accuracy)), kind).expect("accuracy is always defined"),
        auroc: summarize(&col(|m| m.auroc), kind),
        std_kind: kind,
    })
}

fn cell(s: Option<Summary>) -> String {
    match s {
        Some(s) if s.excluded > 0 => format!("{:.4} ± {:.4} ({} undefined)", s.mean, s.std, s.excluded),
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "n/a".to_string(),
    }
}

/// Plain-text table with one row per labelled report and `mean ± std` cells.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let header = ["Model", "Sensitivity", "Specificity", "Accuracy", "AUROC"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, r)| [name.clone(), cell(r.sensitivity), cell(r.specificity), cell(Some(r.accuracy)), cell(r.auroc)])
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    line(&mut out, &widths.map(|w| "-".repeat(w)));
    for row in &body {
        line(&mut out, row);
    }
    out
}
