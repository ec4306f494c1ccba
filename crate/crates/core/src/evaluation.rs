//! Confusion matrices, per-category precision and recall, the
//! random-chance flag, and report emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};

/// A run is suboptimal when any category's precision or recall fails to
/// exceed this value.
pub const RANDOM_CHANCE_THRESHOLD: f64 = 0.17;

/// Rows are true categories, columns are predictions.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], categories: usize) -> Result<Confusion> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0u64; categories]; categories];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= categories || p >= categories {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) outside {categories} categories"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-category `(precision, recall)`; `None` where the denominator is zero.
pub fn precision_recall(confusion: &Confusion) -> Vec<(Option<f64>, Option<f64>)> {
    let n = confusion.len();
    (0..n)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let row: u64 = confusion[c].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[c]).sum();
            let ratio = |d: u64| (d > 0).then(|| tp / d as f64);
            (ratio(col), ratio(row))
        })
        .collect()
}

pub fn overall_accuracy(confusion: &Confusion) -> Result<f64> {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
    Ok(trace as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub category_order: Vec<String>,
    pub confusion: Confusion,
    pub overall_accuracy: f64,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub support: Vec<u64>,
    pub suboptimal_flag: bool,
}

impl MetricsReport {
    pub fn from_predictions(categories: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let confusion = confusion_matrix(truth, predicted, categories.len())?;
        Self::from_confusion(categories.to_vec(), confusion)
    }

    pub fn from_confusion(category_order: Vec<String>, confusion: Confusion) -> Result<Self> {
        if confusion.len() != category_order.len() || confusion.iter().any(|r| r.len() != confusion.len()) {
            return Err(Error::InvalidArgument("confusion matrix must be square over the categories".into()));
        }
        let overall_accuracy = overall_accuracy(&confusion)?;
        let (precision, recall) = precision_recall(&confusion).into_iter().unzip();
        let support = confusion.iter().map(|r| r.iter().sum()).collect();
        let mut report = Self {
            category_order,
            confusion,
            overall_accuracy,
            precision,
            recall,
            support,
            suboptimal_flag: false,
        };
        report.suboptimal_flag = flag_suboptimal(&report, RANDOM_CHANCE_THRESHOLD);
        Ok(report)
    }

    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.category_order.iter().position(|c| c == category)
    }

    /// Recall of `category`, `None` when it is absent or has no support.
    pub fn recall_of(&self, category: &str) -> Option<f64> {
        self.index_of(category).and_then(|i| self.recall[i])
    }

    /// Mean recall over the given categories that have support.
    pub fn mean_recall(&self, categories: &[String]) -> Option<f64> {
        let vals: Vec<f64> = categories.iter().filter_map(|c| self.recall_of(c)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// True iff some category with support has precision or recall at or below
/// `threshold`. Undefined precision (nothing predicted) is skipped along
/// with zero-support categories.
pub fn flag_suboptimal(report: &MetricsReport, threshold: f64) -> bool {
    (0..report.category_order.len()).any(|c| {
        if report.support[c] == 0 {
            return false;
        }
        let low = |m: Option<f64>| m.is_some_and(|v| v <= threshold);
        low(report.precision[c]) || low(report.recall[c])
    })
}

/// Renders a fraction in the one-decimal percent style, e.g. `96.1%`.
pub fn display_percent(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: Option<String>,
    pub dataset_hash: Option<String>,
    pub config_hash: Option<String>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayFields {
    pub overall_accuracy: String,
    pub precision: Vec<Option<String>>,
    pub recall: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub provenance: Provenance,
    pub display: DisplayFields,
}

impl ReportDocument {
    pub fn new(report: MetricsReport, provenance: Provenance) -> Self {
        let fmt = |v: &Vec<Option<f64>>| v.iter().map(|m| m.map(display_percent)).collect();
        let display = DisplayFields {
            overall_accuracy: display_percent(report.overall_accuracy),
            precision: fmt(&report.precision),
            recall: fmt(&report.recall),
        };
        Self {
            report,
            provenance,
            display,
        }
    }
}

pub fn write_report(report: &MetricsReport, provenance: &Provenance, path: &Path) -> Result<()> {
    let doc = ReportDocument::new(report.clone(), provenance.clone());
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Aligned plain-text table: first column left-aligned, the rest right.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Per-category table for one report.
pub fn render_report(report: &MetricsReport) -> String {
    let opt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    let mut rows: Vec<Vec<String>> = report
        .category_order
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                c.clone(),
                opt(report.precision[i]),
                opt(report.recall[i]),
                report.support[i].to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "overall accuracy".into(),
        String::new(),
        display_percent(report.overall_accuracy),
        report.support.iter().sum::<u64>().to_string(),
    ]);
    render_table(&["category", "precision", "recall", "support"], &rows)
}
