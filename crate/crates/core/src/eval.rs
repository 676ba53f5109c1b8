//! Classification metrics and report tables.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{len_true} true labels but {len_pred} predictions")]
    LengthMismatch { len_true: usize, len_pred: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("{names} class names for {classes} classes")]
    NameCount { names: usize, classes: usize },
}

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let k = counts.len();
        if class_names.len() != k {
            return Err(EvalError::NameCount { names: class_names.len(), classes: k });
        }
        if let Some(row) = counts.iter().find(|r| r.len() != k) {
            return Err(EvalError::NameCount { names: k, classes: row.len() });
        }
        Ok(ConfusionMatrix { class_names, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// CSV with a header row and a leading column of class names.
    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![String::new()];
        header.extend(self.class_names.iter().cloned());
        out.write_record(&header)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(
    truth: &[usize],
    predicted: &[usize],
    class_names: &[String],
) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { len_true: truth.len(), len_pred: predicted.len() });
    }
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= k {
                return Err(EvalError::LabelOutOfRange { label, classes: k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { class_names: class_names.to_vec(), counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassScores>,
    pub macro_avg: ClassScores,
    pub weighted_avg: ClassScores,
    pub accuracy: f64,
    pub total: u64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let k = cm.num_classes();
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassScores { precision, recall, f1, support: cm.row_sum(c) }
        })
        .collect();
    let mean = |w: &dyn Fn(&ClassScores) -> f64, f: fn(&ClassScores) -> f64| {
        let den: f64 = per_class.iter().map(w).sum();
        per_class.iter().map(|s| w(s) * f(s)).sum::<f64>() / den
    };
    let avg = |w: &dyn Fn(&ClassScores) -> f64| ClassScores {
        precision: mean(w, |s| s.precision),
        recall: mean(w, |s| s.recall),
        f1: mean(w, |s| s.f1),
        support: total,
    };
    Ok(MetricsReport {
        class_names: cm.class_names.clone(),
        macro_avg: avg(&|_| 1.0),
        weighted_avg: avg(&|s| s.support as f64),
        per_class,
        accuracy: ratio(cm.trace(), total),
        total,
        confusion: cm.clone(),
    })
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<Self, EvalError> {
        metrics(&confusion_matrix(truth, predicted, class_names)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Per-class table with macro and weighted rows, two decimals.
pub fn render_report(report: &MetricsReport) -> String {
    let width = report.class_names.iter().map(String::len).chain(["weighted avg".len()]).max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "{:>width$} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1-score", "support");
    let _ = writeln!(s);
    let row = |s: &mut String, name: &str, c: &ClassScores| {
        let _ = writeln!(s, "{name:>width$} {:>9.2} {:>9.2} {:>9.2} {:>9}", c.precision, c.recall, c.f1, c.support);
    };
    for (name, c) in report.class_names.iter().zip(&report.per_class) {
        row(&mut s, name, c);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>width$} {:>9} {:>9} {:>9.2} {:>9}", "accuracy", "", "", report.accuracy, report.total);
    row(&mut s, "macro avg", &report.macro_avg);
    row(&mut s, "weighted avg", &report.weighted_avg);
    s
}

/// One column of the comparison table.
#[derive(Debug, Clone, Copy)]
pub struct ModelSummary<'a> {
    pub label: &'a str,
    pub report: &'a MetricsReport,
    pub size_bytes: u64,
}

const MB: f64 = 1e6;

fn signed_percent(x: f64) -> String {
    let s = format!("{:.2}%", x.abs());
    if x < 0.0 && s != "0.00%" {
        format!("\u{2212}{s}")
    } else {
        s
    }
}

/// Size, accuracy, macro F1, accuracy delta and compression ratio side by side.
/// The delta is baseline minus quantized accuracy, in percentage points.
pub fn render_comparison(baseline: ModelSummary, quantized: ModelSummary) -> String {
    let delta = 100.0 * (baseline.report.accuracy - quantized.report.accuracy);
    let ratio = baseline.size_bytes as f64 / quantized.size_bytes as f64;
    let rows: [(&str, String, String); 5] = [
        (
            "Model Size (MB)",
            format!("{:.2}", baseline.size_bytes as f64 / MB),
            format!("{:.2}", quantized.size_bytes as f64 / MB),
        ),
        (
            "Validation Accuracy",
            format!("{:.2}%", 100.0 * baseline.report.accuracy),
            format!("{:.2}%", 100.0 * quantized.report.accuracy),
        ),
        (
            "Macro F1-Score",
            format!("{:.2}", baseline.report.macro_avg.f1),
            format!("{:.2}", quantized.report.macro_avg.f1),
        ),
        ("Accuracy Delta", "\u{2014}".into(), signed_percent(delta)),
        ("Compression Ratio", "1.00\u{d7}".into(), format!("{ratio:.2}\u{d7}")),
    ];
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>10} {:>10}", "Metric", baseline.label, quantized.label);
    for (name, a, b) in rows {
        let _ = writeln!(s, "{name:<20} {a:>10} {b:>10}");
    }
    s
}

/// Machine-readable counterpart of [`render_comparison`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_bytes: u64,
    pub quantized_bytes: u64,
    pub baseline_accuracy: f64,
    pub quantized_accuracy: f64,
    pub baseline_macro_f1: f64,
    pub quantized_macro_f1: f64,
    pub accuracy_delta: f64,
    pub compression_ratio: f64,
}

impl Comparison {
    pub fn new(baseline: ModelSummary, quantized: ModelSummary) -> Self {
        Comparison {
            baseline_bytes: baseline.size_bytes,
            quantized_bytes: quantized.size_bytes,
            baseline_accuracy: baseline.report.accuracy,
            quantized_accuracy: quantized.report.accuracy,
            baseline_macro_f1: baseline.report.macro_avg.f1,
            quantized_macro_f1: quantized.report.macro_avg.f1,
            accuracy_delta: baseline.report.accuracy - quantized.report.accuracy,
            compression_ratio: baseline.size_bytes as f64 / quantized.size_bytes as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 1, 2, 2, 1];
        let cm = confusion_matrix(&y, &y, &names(3)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.per_class.iter().all(|c| (c.precision, c.recall, c.f1) == (1.0, 1.0, 1.0)));
    }

    #[test]
    fn single_pair() {
        let cm = confusion_matrix(&[1], &[2], &names(3)).unwrap();
        assert_eq!(cm.counts[1][2], 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn out_of_range_and_length_errors() {
        assert_eq!(
            confusion_matrix(&[0, 3], &[0, 0], &names(3)),
            Err(EvalError::LabelOutOfRange { label: 3, classes: 3 })
        );
        assert!(matches!(confusion_matrix(&[0], &[], &names(3)), Err(EvalError::LengthMismatch { .. })));
        let empty = ConfusionMatrix::from_counts(names(2), vec![vec![0; 2]; 2]).unwrap();
        assert_eq!(metrics(&empty), Err(EvalError::Empty));
    }

    #[test]
    fn empty_predicted_class_has_zero_precision() {
        let m = MetricsReport::from_predictions(&[0, 1], &[0, 0], &names(2)).unwrap();
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
    }

    #[test]
    fn delta_and_ratio_formatting() {
        assert_eq!(signed_percent(-0.173), "\u{2212}0.17%");
        assert_eq!(signed_percent(0.5), "0.50%");
        assert_eq!(signed_percent(-0.001), "0.00%");
        let m = MetricsReport::from_predictions(&[0, 1], &[0, 1], &names(2)).unwrap();
        let a = ModelSummary { label: "F32", report: &m, size_bytes: 100 };
        let table = render_comparison(a, a);
        assert!(table.contains("1.00\u{d7}"));
        assert!(table.contains("0.00%"));
    }

    #[test]
    fn csv_has_header_row_and_column() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![3, 1], vec![0, 2]]).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), ",c0,c1\nc0,3,1\nc1,0,2\n");
    }

    #[test]
    fn json_roundtrip() {
        let m = MetricsReport::from_predictions(&[0, 1, 1], &[0, 1, 0], &names(2)).unwrap();
        assert_eq!(MetricsReport::from_json(&m.to_json()).unwrap(), m);
    }
}
