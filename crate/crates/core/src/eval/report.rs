//! Table-style experiment reports: one row per experiment, one column per
//! attacked keypoint (or pair), plus baseline and average.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::error::{Error, Result};

pub const REPORT_FOOTER: &str = "Absolute centimetre values come from a six-parameter analytic body model \
fitted to synthetic renders and are not comparable with numbers measured on real scans; \
only orderings and signs of the increases are meaningful.";

/// `100·(err − base)/base`.
pub fn percent_increase(error_cm: f64, baseline_cm: f64) -> f64 {
    100.0 * (error_cm - baseline_cm) / baseline_cm
}

/// Perturbation budget of the adversarial images behind one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub mean_mse: f64,
    pub mean_rmse: f64,
    pub mean_linf: f64,
    pub max_linf: f64,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnResult {
    pub label: String,
    pub attack: AttackKind,
    /// Entries contributing to this column.
    pub samples: usize,
    pub mean_error_cm: f64,
    /// Mean unattacked error over the same entries.
    pub baseline_cm: f64,
    pub percent_increase: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub columns: Vec<ColumnResult>,
    /// Mean of the column baselines.
    pub baseline_cm: f64,
    /// Mean of the column errors.
    pub average_cm: f64,
    pub average_increase: f64,
}

impl ReportRow {
    pub fn column(&self, label: &str) -> Option<&ColumnResult> {
        self.columns.iter().find(|c| c.label == label)
    }
}

/// One (entry, attack) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub entry: String,
    pub row: String,
    pub column: String,
    pub error_cm: f64,
    pub baseline_cm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

/// A measurement that could not be made. `column` is absent when the
/// baseline itself failed, which drops the entry from every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub entry: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub kind: String,
    pub message: String,
}

impl FailureRecord {
    pub fn new(entry: &str, column: Option<&str>, err: &Error) -> Self {
        FailureRecord {
            entry: entry.to_string(),
            column: column.map(str::to_string),
            kind: err.kind().to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    /// Distinct subjects with a baseline fit.
    pub subjects: usize,
    /// Entries (subject poses) with a baseline fit.
    pub entries: usize,
    /// Mean unattacked error over those entries.
    pub baseline_cm: f64,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<FailureRecord>,
    pub samples: Vec<SampleRecord>,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    pub footer: String,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Table layout: rows sharing a column set form one block with a
    /// header line; blocks are separated by a blank line. Each row gives
    /// errors in cm followed by a `<name>_increase_pct` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut last_header: Option<Vec<&str>> = None;
        for row in &self.rows {
            let labels: Vec<&str> = row.columns.iter().map(|c| c.label.as_str()).collect();
            if last_header.as_ref() != Some(&labels) {
                if last_header.is_some() {
                    out.push('\n');
                }
                out.push_str(&format!("attack,baseline,{},average\n", labels.join(",")));
                last_header = Some(labels);
            }
            let errors: Vec<String> = row.columns.iter().map(|c| format!("{:.4}", c.mean_error_cm)).collect();
            out.push_str(&format!("{},{:.4},{},{:.4}\n", row.name, row.baseline_cm, errors.join(","), row.average_cm));
            let pcts: Vec<String> = row.columns.iter().map(|c| format!("{:.2}", c.percent_increase)).collect();
            out.push_str(&format!("{}_increase_pct,0.00,{},{:.2}\n", row.name, pcts.join(","), row.average_increase));
        }
        out
    }

    /// Plain-text rendering with the footer, for terminals and logs.
    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "{}: {} entries from {} subjects, baseline {:.4} cm\n",
            self.experiment, self.entries, self.subjects, self.baseline_cm
        );
        for row in &self.rows {
            out.push_str(&format!("  {:<22} average {:.4} cm ({:+.2}%)\n", row.name, row.average_cm, row.average_increase));
            for c in &row.columns {
                let extra = match (&c.success_rate, &c.budget) {
                    (Some(s), Some(b)) => format!("  success {:.0}%  mse {:.2e}", 100.0 * s, b.mean_mse),
                    _ => String::new(),
                };
                out.push_str(&format!(
                    "    {:<28} {:.4} cm ({:+.2}%) n={}{extra}\n",
                    c.label, c.mean_error_cm, c.percent_increase, c.samples
                ));
            }
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("  {} failed measurements\n", self.failures.len()));
        }
        out.push_str(&format!("Note: {}\n", self.footer));
        out
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(&json, bytes).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        let mut f = std::fs::File::create(&txt).map_err(|e| Error::io(&txt, e))?;
        f.write_all(self.summary_text().as_bytes()).map_err(|e| Error::io(&txt, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Aggregates samples of one row into columns, in `columns` order.
/// Columns without samples are dropped.
pub(crate) fn build_row(name: &str, columns: &[(String, AttackKind)], samples: &[SampleRecord]) -> ReportRow {
    let mut out = Vec::new();
    for (label, attack) in columns {
        let mine: Vec<&SampleRecord> = samples.iter().filter(|s| s.row == name && &s.column == label).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let mean = |f: &dyn Fn(&SampleRecord) -> f64| mine.iter().map(|s| f(s)).sum::<f64>() / n;
        let mean_error_cm = mean(&|s| s.error_cm);
        let baseline_cm = mean(&|s| s.baseline_cm);
        let adversarial = mine.iter().all(|s| s.success.is_some());
        let (success_rate, budget) = if adversarial {
            (
                Some(mean(&|s| s.success.unwrap() as u8 as f64)),
                Some(BudgetSummary {
                    mean_mse: mean(&|s| s.mse.unwrap_or(0.0)),
                    mean_rmse: mean(&|s| s.mse.unwrap_or(0.0).sqrt()),
                    mean_linf: mean(&|s| s.linf.unwrap_or(0.0)),
                    max_linf: mine.iter().map(|s| s.linf.unwrap_or(0.0)).fold(0.0, f64::max),
                    mean_iterations: mean(&|s| s.iterations.unwrap_or(0) as f64),
                }),
            )
        } else {
            (None, None)
        };
        out.push(ColumnResult {
            label: label.clone(),
            attack: *attack,
            samples: mine.len(),
            mean_error_cm,
            baseline_cm,
            percent_increase: percent_increase(mean_error_cm, baseline_cm),
            success_rate,
            budget,
        });
    }
    let k = out.len().max(1) as f64;
    let average_cm = out.iter().map(|c| c.mean_error_cm).sum::<f64>() / k;
    let baseline_cm = out.iter().map(|c| c.baseline_cm).sum::<f64>() / k;
    ReportRow {
        name: name.to_string(),
        average_increase: percent_increase(average_cm, baseline_cm),
        columns: out,
        baseline_cm,
        average_cm,
    }
}
