//! Report data model and serialization.
//!
//! Every experiment produces one [`ExperimentReport`]: the resolved config
//! echo, a flat list of named metrics with confidence intervals and bound
//! comparisons, cap/violation counters, and a schema tag. The JSON form is
//! the full document; the CSV form is one row per metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;

/// Schema tag stamped on every report.
pub const SCHEMA_VERSION: &str = "1";

/// Outcome of comparing a metric against its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// The estimate satisfies the bound.
    Pass,
    /// The estimate violates the bound.
    Fail,
    /// Diagnostic value published without a pass/fail claim.
    ReportOnly,
}

/// One named measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Stable metric name, unique within the report.
    pub name: String,
    /// Point estimate (exact value for enumeration metrics).
    pub estimate: f64,
    /// Two-sided interval `[low, high]` containing the estimand with
    /// probability at least 99.7% (degenerate for exact metrics).
    pub ci: [f64; 2],
    /// Reference value the estimate is compared against, when one exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound: Option<f64>,
    /// Name of the in-repo function or rule that produced `bound`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound_ref: Option<String>,
    /// Result of the comparison.
    pub verdict: Verdict,
}

impl MetricRecord {
    /// Diagnostic metric with no bound claim.
    pub fn report_only(name: impl Into<String>, estimate: f64, ci: [f64; 2]) -> Self {
        MetricRecord {
            name: name.into(),
            estimate,
            ci,
            bound: None,
            bound_ref: None,
            verdict: Verdict::ReportOnly,
        }
    }

    /// Metric passing iff `estimate <= bound + slack`.
    pub fn upper_bounded(
        name: impl Into<String>,
        estimate: f64,
        ci: [f64; 2],
        bound: f64,
        bound_ref: impl Into<String>,
        slack: f64,
    ) -> Self {
        MetricRecord {
            name: name.into(),
            estimate,
            ci,
            bound: Some(bound),
            bound_ref: Some(bound_ref.into()),
            verdict: if estimate <= bound + slack { Verdict::Pass } else { Verdict::Fail },
        }
    }
}

/// Full result of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// The resolved configuration that produced these metrics.
    pub config: ExperimentConfig,
    /// All measurements, in a deterministic order.
    pub metrics: Vec<MetricRecord>,
    /// Cap hits, concessions, skips, and other exception counters.
    pub caps: BTreeMap<String, u64>,
    /// Wall-clock runtime. The only field allowed to differ between
    /// otherwise identical runs.
    pub runtime_ms: u64,
    /// Report schema version.
    pub schema: String,
}

/// Serialization/deserialization failures for report documents.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {reason}")]
    CsvRow { row: usize, reason: String },
    #[error("non-finite value in metric {name}: {field}")]
    NonFinite { name: String, field: &'static str },
}

impl ExperimentReport {
    /// Rejects non-finite numbers, which would not survive a JSON round
    /// trip. Experiments must encode infinities as counters in `caps`.
    pub fn check_finite(&self) -> Result<(), ReportError> {
        for m in &self.metrics {
            let fields: [(&'static str, f64); 4] =
                [("estimate", m.estimate), ("ci[0]", m.ci[0]), ("ci[1]", m.ci[1]), ("bound", m.bound.unwrap_or(0.0))];
            for (field, v) in fields {
                if !v.is_finite() {
                    return Err(ReportError::NonFinite { name: m.name.clone(), field });
                }
            }
        }
        Ok(())
    }

    /// Pretty JSON document.
    pub fn to_json(&self) -> Result<String, ReportError> {
        self.check_finite()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a JSON document produced by [`ExperimentReport::to_json`].
    pub fn from_json(text: &str) -> Result<ExperimentReport, ReportError> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV table: header plus one row per metric. `bound` is empty for
    /// metrics without one.
    pub fn to_csv(&self) -> Result<String, ReportError> {
        self.check_finite()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "metric", "estimate", "ci_low", "ci_high", "bound", "verdict"])?;
        for m in &self.metrics {
            let verdict = match m.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "fail",
                Verdict::ReportOnly => "report-only",
            };
            w.write_record([
                self.config.experiment.as_str(),
                &m.name,
                &format_float(m.estimate),
                &format_float(m.ci[0]),
                &format_float(m.ci[1]),
                &m.bound.map(format_float).unwrap_or_default(),
                verdict,
            ])?;
        }
        let bytes = w.into_inner().expect("in-memory writer cannot fail");
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses the metric rows of a CSV document produced by
    /// [`ExperimentReport::to_csv`]: `(experiment, metric)` names plus the
    /// numeric columns and verdict.
    pub fn csv_rows(text: &str) -> Result<Vec<CsvRow>, ReportError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str, ReportError> {
                rec.get(i).ok_or(ReportError::CsvRow {
                    row: idx + 1,
                    reason: format!("missing column {i}"),
                })
            };
            let num = |i: usize| -> Result<f64, ReportError> {
                field(i)?.parse().map_err(|e| ReportError::CsvRow {
                    row: idx + 1,
                    reason: format!("bad number in column {i}: {e}"),
                })
            };
            let bound_text = field(5)?;
            let bound = if bound_text.is_empty() { None } else { Some(num(5)?) };
            let verdict = match field(6)? {
                "pass" => Verdict::Pass,
                "fail" => Verdict::Fail,
                "report-only" => Verdict::ReportOnly,
                other => {
                    return Err(ReportError::CsvRow {
                        row: idx + 1,
                        reason: format!("unknown verdict {other:?}"),
                    })
                }
            };
            rows.push(CsvRow {
                experiment: field(0)?.to_string(),
                metric: field(1)?.to_string(),
                estimate: num(2)?,
                ci_low: num(3)?,
                ci_high: num(4)?,
                bound,
                verdict,
            });
        }
        Ok(rows)
    }

    /// `(pass, fail, report-only)` counts.
    pub fn verdict_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for m in &self.metrics {
            match m.verdict {
                Verdict::Pass => counts.0 += 1,
                Verdict::Fail => counts.1 += 1,
                Verdict::ReportOnly => counts.2 += 1,
            }
        }
        counts
    }

    /// The metric with the given name, if present.
    pub fn metric(&self, name: &str) -> Option<&MetricRecord> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// One parsed CSV metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub experiment: String,
    pub metric: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bound: Option<f64>,
    pub verdict: Verdict,
}

/// Shortest float text that round-trips exactly through `parse::<f64>()`.
fn format_float(v: f64) -> String {
    let mut buf = ryu_lite(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

// `{:?}` on f64 prints the shortest representation that parses back to the
// same bits, which is exactly what a lossless CSV needs.
fn ryu_lite(v: f64) -> String {
    format!("{v:?}")
}
