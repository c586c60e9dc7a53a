//! Carry-forward baseline, confusion metrics, ROC/AUROC and per-sex reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::{encounter_status, BpStatus, CohortSample};
use crate::ehr::Sex;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Forecasts the status of the most recent history visit with a blood
/// pressure reading; score is that status as 0/1.
pub fn carry_forward_baseline(sample: &CohortSample) -> Result<(BpStatus, f64)> {
    let status = sample
        .history()
        .iter()
        .rev()
        .find_map(encounter_status)
        .ok_or_else(|| Error::NoLabelableHistory(sample.patient.to_string()))?;
    Ok((status, status.as_f64()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Precision, recall and F1 of the positive (uncontrolled) class.
    pub fn positive_class(&self) -> ClassMetrics {
        ClassMetrics::from_counts(self.tp, self.fp, self.fn_, self.tp + self.fn_)
    }

    /// Same metrics with the controlled class treated as positive.
    pub fn negative_class(&self) -> ClassMetrics {
        ClassMetrics::from_counts(self.tn, self.fn_, self.fp, self.tn + self.fp)
    }
}

/// `0/0` is 0.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(labels: &[f64], predictions: &[f64]) -> Result<Confusion> {
    if labels.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels, {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::ShapeMismatch("no samples to evaluate".into()));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y >= 0.5, p >= 0.5) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl ClassMetrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize, support: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
        }
    }
}

/// Macro-averaged, support-weighted and per-class precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfSummary {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub controlled: ClassMetrics,
    pub uncontrolled: ClassMetrics,
}

pub fn precision_recall_f1(c: &Confusion) -> PrfSummary {
    let neg = c.negative_class();
    let pos = c.positive_class();
    let n = (neg.support + pos.support) as f64;
    let weighted = |a: f64, b: f64| {
        if n == 0.0 {
            0.0
        } else {
            (a * neg.support as f64 + b * pos.support as f64) / n
        }
    };
    PrfSummary {
        macro_precision: (neg.precision + pos.precision) / 2.0,
        macro_recall: (neg.recall + pos.recall) / 2.0,
        macro_f1: (neg.f1 + pos.f1) / 2.0,
        weighted_precision: weighted(neg.precision, pos.precision),
        weighted_recall: weighted(neg.recall, pos.recall),
        weighted_f1: weighted(neg.f1, pos.f1),
        controlled: neg,
        uncontrolled: pos,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check_scored(labels: &[f64], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels, {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{neg} negatives, {pos} positives")));
    }
    Ok((pos, neg))
}

/// ROC over unique thresholds, descending; equal scores enter together.
pub fn roc_curve(labels: &[f64], scores: &[f64]) -> Result<RocCurve> {
    let (pos, neg) = check_scored(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] >= 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<roc export>", e))?;
        Ok(())
    }
}

/// Trapezoidal area under the ROC curve. Computed from integer counts per tie
/// group so it equals the Mann-Whitney statistic up to one final division.
pub fn auroc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scored(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // twice the area in units of 1/(pos*neg)
    let (mut tp, mut twice_area) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] >= 0.5 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        twice_area += dfp * (2 * tp + dtp);
        tp += dtp;
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub metrics: PrfSummary,
    /// `None` when the group holds a single class.
    pub auroc: Option<f64>,
    pub single_class: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, EvalReport>,
}

/// Metrics over one set of (label, score) pairs.
pub fn evaluate(labels: &[f64], scores: &[f64], threshold: f64) -> Result<EvalReport> {
    let predictions: Vec<f64> = scores
        .iter()
        .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
        .collect();
    let c = confusion(labels, &predictions)?;
    let metrics = precision_recall_f1(&c);
    let auroc = match auroc(labels, scores) {
        Ok(a) => Some(a),
        Err(Error::SingleClass(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        n: labels.len(),
        threshold,
        confusion: c,
        accuracy: c.accuracy(),
        precision: metrics.macro_precision,
        recall: metrics.macro_recall,
        f1: metrics.macro_f1,
        metrics,
        single_class: auroc.is_none(),
        auroc,
        groups: BTreeMap::new(),
    })
}

/// Overall report plus one sub-report per sex present. Sub-reports carry no
/// AUROC, so only the total reports one.
pub fn grouped_report(samples: &[CohortSample], scores: &[f64], threshold: f64) -> Result<EvalReport> {
    if samples.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples, {} scores",
            samples.len(),
            scores.len()
        )));
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.label.as_f64()).collect();
    let mut report = evaluate(&labels, scores, threshold)?;
    for sex in [Sex::Female, Sex::Male] {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].sex == sex).collect();
        if idx.is_empty() {
            continue;
        }
        let l: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let mut sub = evaluate(&l, &s, threshold)?;
        sub.auroc = None;
        report.groups.insert(sex.to_string(), sub);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            Confusion { tp: 1, fp: 0, tn: 1, fn_: 0 }
        );
        assert_eq!(
            confusion(&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0]).unwrap(),
            Confusion { tp: 0, fp: 2, tn: 0, fn_: 1 }
        );
        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[1.0], &[]).is_err());
    }

    #[test]
    fn prf_examples() {
        let perfect = precision_recall_f1(&Confusion { tp: 3, fp: 0, tn: 4, fn_: 0 });
        assert_eq!((perfect.macro_precision, perfect.macro_recall, perfect.macro_f1), (1.0, 1.0, 1.0));
        let half = precision_recall_f1(&Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(half.uncontrolled.f1, 0.5);
        assert_eq!(half.controlled.precision, 0.5);
        assert_eq!((half.macro_precision, half.macro_recall, half.macro_f1), (0.5, 0.5, 0.5));
        let empty_pred = precision_recall_f1(&Confusion { tp: 0, fp: 0, tn: 3, fn_: 2 });
        assert_eq!(empty_pred.uncontrolled.precision, 0.0);
        assert_eq!(empty_pred.uncontrolled.f1, 0.0);
    }

    #[test]
    fn three_sample_roc() {
        let roc = roc_curve(&[1.0, 0.0, 1.0], &[0.9, 0.8, 0.3]).unwrap();
        let pts: Vec<(f64, f64)> = roc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (1.0, 0.5), (1.0, 1.0)]);
        assert_eq!(roc.area(), 0.5);
        assert_eq!(auroc(&[1.0, 0.0, 1.0], &[0.9, 0.8, 0.3]).unwrap(), 0.5);
    }

    #[test]
    fn roc_edge_cases() {
        let all_equal = roc_curve(&[1.0, 0.0, 0.0], &[0.4, 0.4, 0.4]).unwrap();
        assert_eq!(all_equal.points.len(), 2);
        assert_eq!(auroc(&[1.0, 0.0, 0.0], &[0.4, 0.4, 0.4]).unwrap(), 0.5);
        let perfect = roc_curve(&[1.0, 1.0, 0.0], &[0.9, 0.8, 0.1]).unwrap();
        assert!(perfect.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auroc(&[1.0, 1.0, 0.0], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
        assert!(matches!(auroc(&[1.0, 1.0], &[0.1, 0.2]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn report_without_a_class_omits_auroc() {
        let r = evaluate(&[1.0, 1.0], &[0.7, 0.2], 0.5).unwrap();
        assert!(r.single_class && r.auroc.is_none());
        assert_eq!(r.confusion.total(), 2);
    }
}
