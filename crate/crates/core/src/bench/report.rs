//! Report rendering. All formats are deterministic; rates carry 6 decimals
//! in JSON and CSV, and 3 in markdown tables.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{BenchError, ClassMetrics, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    #[serde(alias = "markdown")]
    Md,
}

impl std::str::FromStr for ReportFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Md),
            _ => Err(BenchError::UnknownFormat(s.to_string())),
        }
    }
}

/// Header of the CSV report; one row per value follows.
pub const CSV_HEADER: &str = "section,key,metric,value";

const TABLE_COLUMNS: [&str; 7] = [
    "Anomalous Recall",
    "Anomalous Precision",
    "Anomalous F1",
    "Normal Recall",
    "Normal Precision",
    "Normal F1",
    "Accuracy",
];

pub fn emit_report(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(&report.rounded(6)).expect("serializable") + "\n",
        ReportFormat::Csv => csv(report),
        ReportFormat::Md => markdown(report),
    }
}

fn csv(r: &MetricReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut row = |section: &str, key: &str, metric: &str, value: String| {
        writeln!(out, "{section},{key},{metric},{value}").expect("write to string");
    };
    let c = r.counts;
    for (name, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
        row("counts", "", name, v.to_string());
    }
    for (class, m) in [("anomalous", r.anomalous), ("normal", r.normal)] {
        row("class", class, "recall", format!("{:.6}", m.recall));
        row("class", class, "precision", format!("{:.6}", m.precision));
        row("class", class, "f1", format!("{:.6}", m.f1));
    }
    row("overall", "", "accuracy", format!("{:.6}", r.accuracy));
    for b in r.hard_split.iter().flatten() {
        row("hard_split", &b.bucket, "total", b.total.to_string());
        row("hard_split", &b.bucket, "hits", b.hits.to_string());
        row("hard_split", &b.bucket, "recall", format!("{:.6}", b.recall));
    }
    for (kind, c) in &r.per_category {
        row("category", kind.name(), "total", c.total.to_string());
        row("category", kind.name(), "hits", c.hits.to_string());
        row("category", kind.name(), "recall", format!("{:.6}", c.recall));
    }
    row("localization", "", "temporal_iou", format!("{:.6}", r.localization.temporal));
    row("localization", "", "spatial_iou", format!("{:.6}", r.localization.spatial));
    row("localization", "", "videos", r.localization.videos.to_string());
    out
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    writeln!(out, "| {} |", header.join(" | ")).expect("write to string");
    writeln!(out, "|{}", "---|".repeat(header.len())).expect("write to string");
    for r in rows {
        writeln!(out, "| {} |", r.join(" | ")).expect("write to string");
    }
}

/// The classification row in the layout of the usual comparison table:
/// anomalous R/P/F1, normal R/P/F1, accuracy.
pub fn markdown_row(anomalous: ClassMetrics, normal: ClassMetrics, accuracy: f64) -> Vec<String> {
    [anomalous.recall, anomalous.precision, anomalous.f1, normal.recall, normal.precision, normal.f1, accuracy]
        .iter()
        .map(|v| format!("{v:.3}"))
        .collect()
}

fn markdown(r: &MetricReport) -> String {
    let mut out = String::new();
    table(&mut out, &TABLE_COLUMNS, &[markdown_row(r.anomalous, r.normal, r.accuracy)]);
    if let Some(buckets) = &r.hard_split {
        out.push('\n');
        let header: Vec<&str> = buckets.iter().map(|b| b.bucket.as_str()).collect();
        table(&mut out, &header, &[buckets.iter().map(|b| format!("{:.3}", b.recall)).collect()]);
    }
    if !r.per_category.is_empty() {
        out.push('\n');
        let header: Vec<&str> = r.per_category.keys().map(|k| k.name()).collect();
        table(&mut out, &header, &[r.per_category.values().map(|c| format!("{:.3}", c.recall)).collect()]);
    }
    out.push('\n');
    table(
        &mut out,
        &["Temporal IoU", "Spatial IoU"],
        &[vec![format!("{:.3}", r.localization.temporal), format!("{:.3}", r.localization.spatial)]],
    );
    out
}
