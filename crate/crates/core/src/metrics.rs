//! Confusion matrices, per-class and weighted metrics, one-vs-rest AUC and
//! evaluation reports.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("every sample belongs to one class; no one-vs-rest problem is defined")]
    AllOneClass,
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const FLAG_PRECISION_UNDEFINED: &str = "precision_undefined";
pub const FLAG_RECALL_UNDEFINED: &str = "recall_undefined";
pub const FLAG_AUC_UNDEFINED: &str = "auc_undefined";

/// Rows are true classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>) -> Self {
        let k = names.len();
        Self {
            names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_predictions(names: Vec<String>, labels: &[usize], preds: &[usize]) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(MetricsError::InvalidInput(format!(
                "{} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut cm = Self::new(names);
        let k = cm.classes();
        for (&t, &p) in labels.iter().zip(preds) {
            for label in [t, p] {
                if label >= k {
                    return Err(MetricsError::LabelOutOfRange { label, classes: k });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn supports(&self) -> Vec<u64> {
        (0..self.classes()).map(|k| self.row_sum(k)).collect()
    }
}

/// Correct classifications over all cases.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let trace: u64 = (0..cm.classes()).map(|k| cm.counts[k][k]).sum();
    Ok(trace as f64 / total as f64)
}

/// A per-class ratio; `defined` is false when the denominator was zero and
/// the value was set to 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetric {
    pub value: f64,
    pub defined: bool,
}

fn ratio(num: u64, den: u64) -> ClassMetric {
    if den == 0 {
        ClassMetric {
            value: 0.0,
            defined: false,
        }
    } else {
        ClassMetric {
            value: num as f64 / den as f64,
            defined: true,
        }
    }
}

pub fn precision_per_class(cm: &ConfusionMatrix) -> Vec<ClassMetric> {
    (0..cm.classes())
        .map(|k| ratio(cm.counts[k][k], cm.col_sum(k)))
        .collect()
}

pub fn recall_per_class(cm: &ConfusionMatrix) -> Vec<ClassMetric> {
    (0..cm.classes())
        .map(|k| ratio(cm.counts[k][k], cm.row_sum(k)))
        .collect()
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    let s = precision + recall;
    if s == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / s
    }
}

pub fn weighted_average(values: &[f64], supports: &[u64]) -> Result<f64> {
    if values.len() != supports.len() {
        return Err(MetricsError::InvalidInput(format!(
            "{} values but {} supports",
            values.len(),
            supports.len()
        )));
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let num: f64 = values
        .iter()
        .zip(supports)
        .map(|(v, &s)| v * s as f64)
        .sum();
    Ok(num / total as f64)
}

/// Binary AUC as the Mann-Whitney statistic with midranks for ties.
/// `None` when either side of the problem is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // ranks are 1-based: positions i+1 ..= j
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positive[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = positive.iter().filter(|&&b| b).count();
    let q = n - p;
    if p == 0 || q == 0 {
        return None;
    }
    let p = p as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub per_class: Vec<Option<f64>>,
    /// Support-weighted over classes whose AUC is defined.
    pub weighted: f64,
}

/// One-vs-rest AUC over a row-major `N x K` score matrix.
pub fn ovr_auc(scores: &[f64], classes: usize, labels: &[usize]) -> Result<AucResult> {
    let n = labels.len();
    if classes == 0 || scores.len() != n * classes {
        return Err(MetricsError::InvalidInput(format!(
            "score matrix of {} values does not match {n} samples x {classes} classes",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::InvalidInput("scores contain NaN".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    let mut per_class = Vec::with_capacity(classes);
    let (mut num, mut den) = (0.0, 0u64);
    for k in 0..classes {
        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let auc = binary_auc(&col, &pos);
        if let Some(a) = auc {
            let support = pos.iter().filter(|&&b| b).count() as u64;
            num += a * support as f64;
            den += support;
        }
        per_class.push(auc);
    }
    if den == 0 {
        return Err(MetricsError::AllOneClass);
    }
    Ok(AucResult {
        per_class,
        weighted: num / den as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub accuracy: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    pub auc_w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub overall: Overall,
    pub per_class: Vec<ClassRow>,
    pub confusion: Vec<Vec<u64>>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Builds a report. Metrics are stored rounded to 4 decimals. `scores`, when
/// given, is the row-major `N x K` probability matrix behind `labels`.
pub fn build_report(
    cm: &ConfusionMatrix,
    scores: Option<&[f64]>,
    labels: &[usize],
    model: &str,
    dataset: &str,
) -> Result<EvalReport> {
    let k = cm.classes();
    if cm.names.len() != k {
        return Err(MetricsError::SchemaMismatch(format!(
            "{} class names for a {k}-class matrix",
            cm.names.len()
        )));
    }
    let acc = accuracy(cm)?;
    let supports = cm.supports();
    let prec = precision_per_class(cm);
    let rec = recall_per_class(cm);
    let f1s: Vec<f64> = prec.iter().zip(&rec).map(|(p, r)| f1(p.value, r.value)).collect();
    let auc = match scores {
        Some(s) => {
            if labels.len() as u64 != cm.total() {
                return Err(MetricsError::SchemaMismatch(format!(
                    "{} labels for {} confusion entries",
                    labels.len(),
                    cm.total()
                )));
            }
            match ovr_auc(s, k, labels) {
                Ok(a) => Some(a),
                Err(MetricsError::AllOneClass) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };
    let values = |m: &[ClassMetric]| m.iter().map(|c| c.value).collect::<Vec<_>>();
    let per_class = (0..k)
        .map(|i| {
            let mut flags = Vec::new();
            if !prec[i].defined {
                flags.push(FLAG_PRECISION_UNDEFINED.to_string());
            }
            if !rec[i].defined {
                flags.push(FLAG_RECALL_UNDEFINED.to_string());
            }
            if let Some(a) = &auc {
                if a.per_class[i].is_none() {
                    flags.push(FLAG_AUC_UNDEFINED.to_string());
                }
            }
            ClassRow {
                name: cm.names[i].clone(),
                precision: round4(prec[i].value),
                recall: round4(rec[i].value),
                f1: round4(f1s[i]),
                support: supports[i],
                flags,
            }
        })
        .collect();
    Ok(EvalReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        overall: Overall {
            accuracy: round4(acc),
            precision_w: round4(weighted_average(&values(&prec), &supports)?),
            recall_w: round4(weighted_average(&values(&rec), &supports)?),
            f1_w: round4(weighted_average(&f1s, &supports)?),
            auc_w: auc.map(|a| round4(a.weighted)),
        },
        per_class,
        confusion: cm.counts.clone(),
    })
}

impl EvalReport {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    /// Structural checks. A report with no per-class rows and no confusion
    /// matrix is a summary-only row (for example a published baseline).
    pub fn validate(&self) -> Result<()> {
        let o = &self.overall;
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        let overall_ok = [o.accuracy, o.precision_w, o.recall_w, o.f1_w]
            .into_iter()
            .chain(o.auc_w)
            .all(in_unit);
        if !overall_ok {
            return Err(MetricsError::SchemaMismatch(format!(
                "{}: overall metric outside [0, 1]",
                self.model
            )));
        }
        let k = self.per_class.len();
        if self.confusion.len() != k || self.confusion.iter().any(|r| r.len() != k) {
            return Err(MetricsError::SchemaMismatch(format!(
                "{}: {k} class rows but a {}-row confusion matrix",
                self.model,
                self.confusion.len()
            )));
        }
        for (row, counts) in self.per_class.iter().zip(&self.confusion) {
            if !(in_unit(row.precision) && in_unit(row.recall) && in_unit(row.f1)) {
                return Err(MetricsError::SchemaMismatch(format!(
                    "{}: class {} metric outside [0, 1]",
                    self.model, row.name
                )));
            }
            if counts.iter().sum::<u64>() != row.support {
                return Err(MetricsError::SchemaMismatch(format!(
                    "{}: class {} support {} disagrees with its confusion row",
                    self.model, row.name, row.support
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)
            .map_err(|e| MetricsError::SchemaMismatch(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }
}

fn check_consistent(reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        r.validate()?;
    }
    let mut detailed = reports.iter().filter(|r| !r.per_class.is_empty());
    if let Some(first) = detailed.next() {
        for r in detailed {
            if r.classes() != first.classes() {
                return Err(MetricsError::SchemaMismatch(format!(
                    "{} has {} classes but {} has {}",
                    r.model,
                    r.classes(),
                    first.model,
                    first.classes()
                )));
            }
        }
    }
    Ok(())
}

const COLUMNS: [&str; 5] = ["Model", "Accuracy", "Precision", "Recall", "F1"];

fn cells(r: &EvalReport) -> [String; 5] {
    let o = &r.overall;
    [
        r.model.clone(),
        format!("{:.2}", o.accuracy),
        format!("{:.2}", o.precision_w),
        format!("{:.2}", o.recall_w),
        format!("{:.2}", o.f1_w),
    ]
}

/// Aligned plain-text comparison table with 2-decimal cells.
pub fn render_comparison(reports: &[EvalReport]) -> Result<String> {
    check_consistent(reports)?;
    let rows: Vec<[String; 5]> = reports.iter().map(cells).collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, " | {c:>w$}");
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&COLUMNS.map(String::from));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&rule);
    for row in &rows {
        line(row);
    }
    Ok(out)
}

pub fn comparison_csv(reports: &[EvalReport]) -> Result<String> {
    check_consistent(reports)?;
    let mut out = String::from("model,accuracy,precision,recall,f1\n");
    for r in reports {
        let [m, a, p, rc, f] = cells(r);
        let m = if m.contains([',', '"']) {
            format!("\"{}\"", m.replace('"', "\"\""))
        } else {
            m
        };
        let _ = writeln!(out, "{m},{a},{p},{rc},{f}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn accuracy_examples() {
        let cm = ConfusionMatrix::from_predictions(names(3), &[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.75);
        let cm = ConfusionMatrix::from_predictions(names(2), &[0, 1], &[1, 0]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
        assert_eq!(accuracy(&ConfusionMatrix::new(names(2))), Err(MetricsError::EmptyMatrix));
    }

    #[test]
    fn never_predicted_class_is_flagged() {
        let cm = ConfusionMatrix::from_predictions(names(2), &[0, 1, 1], &[0, 0, 0]).unwrap();
        let p = precision_per_class(&cm);
        let r = recall_per_class(&cm);
        assert_eq!(p[1], ClassMetric { value: 0.0, defined: false });
        assert_eq!(r[1].value, 0.0);
        let rep = build_report(&cm, None, &[0, 1, 1], "m", "d").unwrap();
        assert_eq!(rep.per_class[1].flags, vec![FLAG_PRECISION_UNDEFINED]);
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.91, 0.04) - 0.076_631_578_947_368_42).abs() < 1e-12);
        assert_eq!(format!("{:.2}", f1(0.91, 0.04)), "0.08");
        assert_eq!(format!("{:.2}", f1(0.92, 0.94)), "0.93");
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(binary_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(binary_auc(&[0.5, 0.6], &[true, true]), None);
        assert_eq!(ovr_auc(&[0.5, 0.5, 0.5, 0.5], 2, &[0, 0]), Err(MetricsError::AllOneClass));
    }

    #[test]
    fn report_json_round_trip() {
        let labels = [0, 1, 2, 2, 1, 0];
        let preds = [0, 2, 2, 2, 1, 1];
        let scores: Vec<f64> = (0..18).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let cm = ConfusionMatrix::from_predictions(names(3), &labels, &preds).unwrap();
        let rep = build_report(&cm, Some(&scores), &labels, "model", "data").unwrap();
        assert_eq!(EvalReport::from_json(&rep.to_json()).unwrap(), rep);
    }

    #[test]
    fn comparison_shape() {
        let cm = ConfusionMatrix::from_predictions(names(2), &[0, 1], &[0, 1]).unwrap();
        let rep = build_report(&cm, None, &[0, 1], "only", "d").unwrap();
        let table = render_comparison(std::slice::from_ref(&rep)).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().starts_with("only "));

        let cm3 = ConfusionMatrix::from_predictions(names(3), &[0, 1, 2], &[0, 1, 2]).unwrap();
        let rep3 = build_report(&cm3, None, &[0, 1, 2], "other", "d").unwrap();
        assert!(matches!(
            render_comparison(&[rep, rep3]),
            Err(MetricsError::SchemaMismatch(_))
        ));
    }
}
