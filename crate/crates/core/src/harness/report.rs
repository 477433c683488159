use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CampaignReport, SampleRecord};
use crate::error::{Error, Result};

/// Version of the JSON report layout and of the CSV column order.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Flat CSV row; per-bin counts are `;`-separated.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    index: usize,
    label: usize,
    adversarial_label: usize,
    success: bool,
    l0: usize,
    queries: usize,
    elapsed_s: f64,
    added: usize,
    removed: usize,
    added_per_bin: String,
    removed_per_bin: String,
    diagnostic: String,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn split(s: &str, row: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| p.parse().map_err(|_| Error::parse(format!("row {row}"), format!("bad bin count {p:?}"))))
        .collect()
}

/// Writes `report` after checking it against its own records.
pub fn export_report(report: &CampaignReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    report.check_consistency()?;
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report)?;
            std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in &report.records {
                w.serialize(CsvRow {
                    index: r.index,
                    label: r.label,
                    adversarial_label: r.adversarial_label,
                    success: r.success,
                    l0: r.l0,
                    queries: r.queries,
                    elapsed_s: r.elapsed_s,
                    added: r.added,
                    removed: r.removed,
                    added_per_bin: join(&r.added_per_bin),
                    removed_per_bin: join(&r.removed_per_bin),
                    diagnostic: r.diagnostic.clone().unwrap_or_default(),
                })?;
            }
            if report.records.is_empty() {
                // Header only, so an empty report still names its columns.
                w.write_record([
                    "index",
                    "label",
                    "adversarial_label",
                    "success",
                    "l0",
                    "queries",
                    "elapsed_s",
                    "added",
                    "removed",
                    "added_per_bin",
                    "removed_per_bin",
                    "diagnostic",
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn load_report_json(path: impl AsRef<Path>) -> Result<CampaignReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: CampaignReport = serde_json::from_str(&text)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unsupported report schema version {}", report.schema_version),
        ));
    }
    report.check_consistency()?;
    Ok(report)
}

pub fn load_records_csv(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        out.push(SampleRecord {
            index: row.index,
            label: row.label,
            adversarial_label: row.adversarial_label,
            success: row.success,
            l0: row.l0,
            queries: row.queries,
            elapsed_s: row.elapsed_s,
            added: row.added,
            removed: row.removed,
            added_per_bin: split(&row.added_per_bin, i + 1)?,
            removed_per_bin: split(&row.removed_per_bin, i + 1)?,
            diagnostic: (!row.diagnostic.is_empty()).then_some(row.diagnostic),
        });
    }
    Ok(out)
}
