use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SemiseError};
use crate::pipeline::{TrainConfig, CONFIG_KEYS};
use crate::synthdata::{encode_dataset, Dataset};

/// Column order of the metrics CSV. Metrics a task does not produce are left empty.
pub const METRICS_CSV_COLUMNS: [&str; 8] = [
    "config_hash",
    "alpha",
    "f1_macro",
    "recall_macro",
    "maee",
    "iou",
    "dice",
    "spearman",
];

/// Named scalar metrics of one run with enough metadata to trace it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub alpha: f64,
    pub classes: usize,
    pub dataset_digest: String,
    pub timestamp_unix: u64,
}

/// Hex SHA-256 of the dataset's file encoding.
pub fn dataset_digest(data: &Dataset) -> Result<String> {
    let digest = Sha256::digest(encode_dataset(data)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn check_range(name: &str, v: f64, classes: usize) -> Result<()> {
    let (lo, hi) = match name {
        "f1_macro" | "recall_macro" | "iou" | "dice" | "pair_accuracy" => (0.0, 1.0),
        "maee" => (0.0, classes.saturating_sub(1) as f64),
        "spearman" => (-1.0, 1.0),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    };
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(SemiseError::Contract(format!("metric {name} = {v} outside [{lo}, {hi}]")))
    }
}

impl MetricsReport {
    /// Fails if any metric lies outside its defined range.
    pub fn new(
        task: &str,
        cfg: &TrainConfig,
        classes: usize,
        dataset_digest: String,
        metrics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        for (k, &v) in &metrics {
            check_range(k, v, classes)?;
        }
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(MetricsReport {
            task: task.to_string(),
            metrics,
            config: CONFIG_KEYS
                .iter()
                .map(|k| (k.to_string(), cfg.get(k).expect("known key")))
                .collect(),
            config_hash: cfg.hash(),
            alpha: cfg.alpha,
            classes,
            dataset_digest,
            timestamp_unix,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut row = vec![self.config_hash.clone(), self.alpha.to_string()];
        for col in &METRICS_CSV_COLUMNS[2..] {
            row.push(self.metrics.get(*col).map(f64::to_string).unwrap_or_default());
        }
        row
    }
}

pub(crate) fn lf_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// Header plus one row per report.
pub fn write_metrics_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut wr = lf_writer(w);
    wr.write_record(METRICS_CSV_COLUMNS)?;
    for r in reports {
        wr.write_record(r.csv_record())?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_metric_rejected() {
        let cfg = TrainConfig::default();
        let bad: BTreeMap<String, f64> = [("f1_macro".to_string(), 1.2)].into();
        assert!(MetricsReport::new("classify", &cfg, 5, "x".into(), bad).is_err());
        let bad: BTreeMap<String, f64> = [("maee".to_string(), 4.5)].into();
        assert!(MetricsReport::new("classify", &cfg, 5, "x".into(), bad).is_err());
    }

    #[test]
    fn csv_has_fixed_columns_and_lf() {
        let cfg = TrainConfig::default();
        let m: BTreeMap<String, f64> = [("f1_macro".to_string(), 0.75), ("maee".to_string(), 0.25)].into();
        let r = MetricsReport::new("classify", &cfg, 5, "abc".into(), m).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[r.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains('\r'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_COLUMNS.join(","));
        assert_eq!(lines[1], format!("{},0.5,0.75,,0.25,,,", cfg.hash()));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
