//! Confusion-matrix metrics and ROC analysis.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio(self.tp + self.tn, self.total(), "accuracy", "no cases")
    }

    pub fn sensitivity(&self) -> Result<f64> {
        ratio(
            self.tp,
            self.tp + self.fn_,
            "sensitivity",
            "no actual positives",
        )
    }

    pub fn specificity(&self) -> Result<f64> {
        ratio(
            self.tn,
            self.tn + self.fp,
            "specificity",
            "no actual negatives",
        )
    }
}

fn ratio(num: u64, den: u64, what: &str, why: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} is undefined: {why}"
        )));
    }
    Ok(num as f64 / den as f64)
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Argument(format!(
            "need equal non-empty score and label lists, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("labels must be 0 or 1, got {l}")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Argument(format!("scores must not be NaN, got {s}")));
    }
    Ok(())
}

/// Tallies predictions `score >= threshold` against labels.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Integer percent, rounding halves up.
pub fn round_percent(x: f64) -> i64 {
    // The epsilon keeps values like 0.125 * 100 = 12.499999... rounding up.
    (x * 100.0 + 0.5 + 1e-9).floor() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fp_rate, tp_rate)` from the highest threshold down; starts at
    /// `(0, 0)` and ends at `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// Two columns, `fp_rate tp_rate`, one point per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# fp_rate\ttp_rate\n");
        for (x, y) in &self.points {
            writeln!(out, "{x:.6}\t{y:.6}").expect("write to string");
        }
        out
    }
}

/// ROC curve with one step per distinct score. Tied scores move both rates
/// at once, so the trapezoid area equals the Mann-Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area times n_pos * n_neg, kept exact in integers.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp_prev, fp_prev) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp_prev) as u128 * (tp + tp_prev) as u128;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = area2 as f64 / (2 * n_pos * n_neg) as f64;
    Ok(RocCurve { points, auc })
}
