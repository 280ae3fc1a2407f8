use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use crate::error::{Error, Result};
use crate::synthdata::Category;

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub overall: f64,
    #[serde(rename = "yes/no")]
    pub yes_no: f64,
    pub number: f64,
    pub other: f64,
    pub count: usize,
    pub skip_rate: f64,
}

impl MetricsRow {
    pub fn new(name: &str, m: &Metrics) -> Self {
        MetricsRow {
            name: name.to_string(),
            overall: m.accuracy(),
            yes_no: m.category_accuracy(Category::YesNo),
            number: m.category_accuracy(Category::Number),
            other: m.category_accuracy(Category::Other),
            count: m.total(),
            skip_rate: m.skip_rate(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    name: String,
    metrics: Metrics,
}

pub fn write_metrics_file(path: &Path, name: &str, metrics: &Metrics) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let body = serde_json::to_string_pretty(&MetricsFile {
        name: name.to_string(),
        metrics: metrics.clone(),
    })?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_file(path: &Path) -> Result<(String, Metrics)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: MetricsFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((f.name, f.metrics))
}

/// CSV with a header line, rows sorted by name.
pub fn to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &sorted {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn render_table(rows: &[MetricsRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let width = sorted.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}  {:>5}\n",
        "name", "overall", "yes/no", "number", "other", "count", "skip"
    );
    for r in &sorted {
        out.push_str(&format!(
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>6}  {:>5.3}\n",
            r.name,
            100.0 * r.overall,
            100.0 * r.yes_no,
            100.0 * r.number,
            100.0 * r.other,
            r.count,
            r.skip_rate
        ));
    }
    out
}
