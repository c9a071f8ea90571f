//! Threshold metrics, ROC/PR areas and curve export.
//!
//! A probability counts as a positive prediction when `p >= threshold`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    TN,
    FP,
    FN,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::TP, Outcome::TN, Outcome::FP, Outcome::FN];

    pub fn of(predicted_positive: bool, label: u8) -> Outcome {
        match (predicted_positive, label == 1) {
            (true, true) => Outcome::TP,
            (true, false) => Outcome::FP,
            (false, true) => Outcome::FN,
            (false, false) => Outcome::TN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::TP => "TP",
            Outcome::TN => "TN",
            Outcome::FP => "FP",
            Outcome::FN => "FN",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

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

    pub fn count(&self, o: Outcome) -> usize {
        match o {
            Outcome::TP => self.tp,
            Outcome::TN => self.tn,
            Outcome::FP => self.fp,
            Outcome::FN => self.fn_,
        }
    }
}

fn check_inputs(scores: &[f64], labels: &[u8], mask: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(Error::shape(
            "metrics",
            format!(
                "{} scores, {} labels, {} mask entries",
                scores.len(),
                labels.len(),
                mask.len()
            ),
        ));
    }
    Ok(())
}

pub fn confusion(
    probabilities: &[f64],
    labels: &[u8],
    mask: &[bool],
    threshold: f64,
) -> Result<ConfusionMatrix> {
    check_inputs(probabilities, labels, mask)?;
    let mut cm = ConfusionMatrix::default();
    for ((&p, &y), _) in probabilities.iter().zip(labels).zip(mask).filter(|(_, &m)| m) {
        match Outcome::of(p >= threshold, y) {
            Outcome::TP => cm.tp += 1,
            Outcome::TN => cm.tn += 1,
            Outcome::FP => cm.fp += 1,
            Outcome::FN => cm.fn_ += 1,
        }
    }
    if cm.total() == 0 {
        return Err(Error::EmptyMask("confusion"));
    }
    Ok(cm)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Ratios that were 0/0 and reported as 0.
    pub warnings: Vec<String>,
}

pub fn threshold_metrics(cm: &ConfusionMatrix) -> ThresholdMetrics {
    let mut warnings = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            warnings.push(format!("{name} is 0/0; reported as 0"));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp, "precision");
    let recall = ratio(cm.tp, cm.tp + cm.fn_, "recall");
    let specificity = ratio(cm.tn, cm.tn + cm.fp, "specificity");
    let accuracy = ratio(cm.tp + cm.tn, cm.total(), "accuracy");
    let f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, "f1");
    for w in &warnings {
        log::warn!("{w}");
    }
    ThresholdMetrics {
        f1,
        accuracy,
        balanced_accuracy: (recall + specificity) / 2.0,
        precision,
        recall,
        warnings,
    }
}

/// Masked `(score, label)` pairs sorted by descending score.
fn ranked(scores: &[f64], labels: &[u8], mask: &[bool]) -> Result<(Vec<(f64, u8)>, usize, usize)> {
    check_inputs(scores, labels, mask)?;
    let mut pairs: Vec<(f64, u8)> = scores
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&s, &y), _)| (s, y))
        .collect();
    if pairs.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = pairs.iter().filter(|p| p.1 == 1).count();
    let n = pairs.len() - pos;
    Ok((pairs, pos, n))
}

/// Cumulative `(fp, tp)` after each group of tied scores, descending.
fn sweep(pairs: &[(f64, u8)]) -> Vec<(f64, usize, usize)> {
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, fp, tp));
    }
    out
}

/// Trapezoidal area under the ROC curve; tied scores form a single step.
pub fn auroc(scores: &[f64], labels: &[u8], mask: &[bool]) -> Result<f64> {
    let (pairs, p, n) = ranked(scores, labels, mask)?;
    if p == 0 || n == 0 {
        return Err(Error::Metric("AUROC needs both classes in the mask".into()));
    }
    let mut area = 0.0;
    let (mut fp0, mut tp0) = (0usize, 0usize);
    for (_, fp, tp) in sweep(&pairs) {
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        fp0 = fp;
        tp0 = tp;
    }
    Ok(area / (p as f64 * n as f64))
}

/// Step-interpolated area under the precision-recall curve.
///
/// At every distinct threshold the precision is replaced by its envelope (the best
/// precision at any lower threshold) and weighted by the recall gained there.
pub fn auprc(scores: &[f64], labels: &[u8], mask: &[bool]) -> Result<f64> {
    let (pairs, p, _) = ranked(scores, labels, mask)?;
    if p == 0 {
        return Err(Error::Metric("AUPRC needs at least one positive in the mask".into()));
    }
    let points: Vec<(f64, f64)> = sweep(&pairs)
        .into_iter()
        .map(|(_, fp, tp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64))
        .collect();
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        envelope[i] = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for ((recall, _), env) in points.iter().zip(&envelope) {
        area += (recall - prev_recall) * env;
        prev_recall = *recall;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// ROC points `(fpr, tpr)` from `(0, 0)` through every distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8], mask: &[bool]) -> Result<Vec<CurvePoint>> {
    let (pairs, p, n) = ranked(scores, labels, mask)?;
    if p == 0 || n == 0 {
        return Err(Error::Metric("ROC curve needs both classes in the mask".into()));
    }
    let mut out = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    out.extend(sweep(&pairs).into_iter().map(|(s, fp, tp)| CurvePoint {
        threshold: s,
        x: fp as f64 / n as f64,
        y: tp as f64 / p as f64,
    }));
    Ok(out)
}

/// PR points `(recall, precision)` at every distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8], mask: &[bool]) -> Result<Vec<CurvePoint>> {
    let (pairs, p, _) = ranked(scores, labels, mask)?;
    if p == 0 {
        return Err(Error::Metric("PR curve needs at least one positive".into()));
    }
    Ok(sweep(&pairs)
        .into_iter()
        .map(|(s, fp, tp)| CurvePoint {
            threshold: s,
            x: tp as f64 / p as f64,
            y: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

pub fn write_curve<W: Write>(mut w: W, header: &str, points: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "{header}")?;
    for pt in points {
        writeln!(w, "{},{},{}", pt.threshold, pt.x, pt.y)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
}

/// Full report over the masked nodes.
pub fn evaluate(
    probabilities: &[f64],
    labels: &[u8],
    mask: &[bool],
    threshold: f64,
) -> Result<MetricReport> {
    let cm = confusion(probabilities, labels, mask, threshold)?;
    let t = threshold_metrics(&cm);
    Ok(MetricReport {
        f1: t.f1,
        accuracy: t.accuracy,
        balanced_accuracy: t.balanced_accuracy,
        precision: t.precision,
        recall: t.recall,
        auroc: auroc(probabilities, labels, mask)?,
        auprc: auprc(probabilities, labels, mask)?,
        threshold,
        confusion: cm,
    })
}
