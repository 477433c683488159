//! Merged table over campaign reports, one row per report, with every
//! statistic recomputed from the per-sample records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spikefool::attacks::AttackSpec;
use spikefool::harness::{load_report_json, CampaignReport};

use crate::commands::write_json;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub attack: String,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub n_initially_correct: usize,
    pub success_rate: Option<f64>,
    pub median_l0: Option<f64>,
    pub median_queries: Option<f64>,
    pub median_elapsed_s: Option<f64>,
    pub total_added: usize,
    pub total_removed: usize,
}

impl SummaryRow {
    pub fn from_report(source: &Path, r: &CampaignReport) -> Self {
        let fresh = CampaignReport::from_records(
            r.attack.clone(),
            r.seed,
            r.n_classes,
            r.n_bins,
            r.n_samples,
            r.records.clone(),
        );
        let (lambda, eta) = match &r.attack {
            AttackSpec::SpikeFool(c) => (Some(c.lambda), Some(c.eta)),
            _ => (None, None),
        };
        SummaryRow {
            source: source.display().to_string(),
            attack: r.attack.name().to_string(),
            lambda,
            eta,
            n_initially_correct: fresh.n_initially_correct,
            success_rate: fresh.success_rate,
            median_l0: fresh.median_l0,
            median_queries: fresh.median_queries,
            median_elapsed_s: fresh.median_elapsed_s,
            total_added: fresh.total_added,
            total_removed: fresh.total_removed,
        }
    }
}

/// Rows grouped by attack and sorted by λ within each group.
pub fn summarize(paths: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut rows =
        paths.iter().map(|p| Ok(SummaryRow::from_report(p, &load_report_json(p)?))).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.attack
            .cmp(&b.attack)
            .then(a.lambda.unwrap_or(f64::INFINITY).total_cmp(&b.lambda.unwrap_or(f64::INFINITY)))
            .then(a.eta.unwrap_or(0.0).total_cmp(&b.eta.unwrap_or(0.0)))
            .then(a.source.cmp(&b.source))
    });
    Ok(rows)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.digits$}"))
}

pub fn markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "| attack | lambda | eta | samples | success % | median L0 | median queries | median time (s) | added | removed | source |\n\
         |---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.attack,
            cell(r.lambda, 2),
            cell(r.eta, 2),
            r.n_initially_correct,
            cell(r.success_rate, 2),
            cell(r.median_l0, 1),
            cell(r.median_queries, 1),
            cell(r.median_elapsed_s, 3),
            r.total_added,
            r.total_removed,
            r.source
        );
    }
    s
}

pub fn write_summary(out: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_json(&out.join("summary.json"), rows)?;
    let md = out.join("summary.md");
    std::fs::write(&md, markdown(rows)).map_err(|e| CliError::io(&md, e))?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    let csv_path = out.join("summary.csv");
    w.flush().map_err(|e| CliError::io(&csv_path, e))
}
