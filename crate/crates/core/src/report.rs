//! Run summaries and Table-style comparison output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, PRECISION_THRESHOLDS};
use crate::train::{train, StepRecord, TrainConfig};

/// SHA-256 of the config's canonical JSON (keys sorted), hex encoded.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    // Going through `Value` sorts object keys, so field order never matters.
    let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub final_losses: StepRecord,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Text,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            other => Err(Error::invalid(format!("unknown table format {other:?} (text|csv)"))),
        }
    }
}

const COLUMNS: [&str; 6] = ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "mIoU"];

fn row_values(report: &MetricsReport) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (slot, &t) in out.iter_mut().zip(&PRECISION_THRESHOLDS) {
        *slot = 100.0 * report.precision(t).unwrap_or(f64::NAN);
    }
    out[5] = 100.0 * report.miou;
    out
}

/// Percentages with two decimals. In text form the best value of every
/// column is followed by `*` (all tied rows are marked); CSV stays numeric.
pub fn report_table(reports: &[(String, MetricsReport)], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("report_table needs at least one report"));
    }
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|(_, r)| row_values(r).map(|v| format!("{v:.2}")))
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            writeln!(out, "run,{}", COLUMNS.join(",")).unwrap();
            for ((label, _), row) in reports.iter().zip(&rows) {
                writeln!(out, "{},{}", csv_field(label), row.join(",")).unwrap();
            }
        }
        TableFormat::Text => {
            // Compare the printed values so marks agree with what is shown.
            let best: Vec<String> = (0..6)
                .map(|c| {
                    rows.iter()
                        .map(|r| &r[c])
                        .max_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()))
                        .unwrap()
                        .clone()
                })
                .collect();
            let label_w = reports.iter().map(|(l, _)| l.chars().count()).max().unwrap().max(3);
            let cell_w = 8;
            write!(out, "{:<label_w$}", "run").unwrap();
            for c in COLUMNS {
                write!(out, "  {c:>cell_w$}").unwrap();
            }
            out.push('\n');
            for ((label, _), row) in reports.iter().zip(&rows) {
                write!(out, "{label:<label_w$}").unwrap();
                for (v, b) in row.iter().zip(&best) {
                    let cell = if v == b { format!("{v}*") } else { format!("{v} ") };
                    write!(out, "  {cell:>cell_w$}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One arm of the 2x2 grid over language gating and joint optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lang_gated: bool,
    pub joint: bool,
    pub summary: RunSummary,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!("lang-gated {} / joint {}", mark(self.lang_gated), mark(self.joint))
    }
}

/// The four flag combinations in table order: neither, joint only,
/// gating only, both.
pub const ABLATION_ARMS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

/// Trains and evaluates a single configuration.
pub fn run(run_id: &str, config: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<RunSummary> {
    let outcome = train(config, train_set, None)?;
    let metrics = evaluate(&outcome.model, test_set, 0.5)?;
    Ok(RunSummary {
        run_id: run_id.to_string(),
        config_hash: config_hash(config)?,
        final_losses: *outcome.log.last().expect("at least one step"),
        metrics,
        seconds: outcome.seconds,
    })
}

/// Trains the four arms from `base`, changing only `use_text` and
/// `detach_fusion`. Rows come back in [`ABLATION_ARMS`] order.
pub fn ablation_run(base: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<Vec<AblationRow>> {
    ABLATION_ARMS
        .iter()
        .enumerate()
        .map(|(i, &(lang_gated, joint))| {
            let config = TrainConfig {
                use_text: lang_gated,
                detach_fusion: !joint,
                ..base.clone()
            };
            log::info!("ablation arm {}: lang_gated={lang_gated} joint={joint}", i + 1);
            let summary = run(&format!("arm{}", i + 1), &config, train_set, test_set)?;
            Ok(AblationRow {
                lang_gated,
                joint,
                summary,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow], format: TableFormat) -> Result<String> {
    let reports: Vec<(String, MetricsReport)> = rows.iter().map(|r| (r.label(), r.summary.metrics.clone())).collect();
    report_table(&reports, format)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<TableFormat>().unwrap(), TableFormat::Csv);
        assert!("html".parse::<TableFormat>().unwrap_err().is_validation());
    }

    #[test]
    fn csv_quotes_awkward_labels() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
