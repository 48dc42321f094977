use std::io::Write;

use crate::error::{Result, SemiseError};
use crate::evalkit::probes::{evaluate_classification, ClassifyOutcome};
use crate::evalkit::report::lf_writer;
use crate::pipeline::{prepare, train_full, Checkpoint, TrainConfig};
use crate::synthdata::Dataset;

pub const SWEEP_CSV_COLUMNS: [&str; 5] = ["alpha", "f1_macro", "maee", "recall_macro", "config_hash"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub f1_macro: f64,
    pub maee: f64,
    pub recall_macro: f64,
    pub config_hash: String,
}

/// Train both phases on the split of `data`, then run the classification probe.
pub fn run_classification(cfg: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, ClassifyOutcome)> {
    let prepared = prepare(cfg, data)?;
    let ckpt = train_full(cfg, &prepared)?;
    let outcome = evaluate_classification(cfg, &ckpt.encoder, &prepared.split.train, &prepared.split.test)?;
    Ok((ckpt, outcome))
}

/// One full run per α, in ascending α order, sharing every other setting.
pub fn alpha_sweep(template: &TrainConfig, alphas: &[f64], data: &Dataset) -> Result<Vec<SweepRow>> {
    let mut sorted = alphas.to_vec();
    if let Some(bad) = sorted.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(SemiseError::Config(format!("alpha {bad} outside [0, 1]")));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
        .into_iter()
        .map(|alpha| {
            let cfg = TrainConfig {
                alpha,
                ..template.clone()
            };
            let (_, out) = run_classification(&cfg, data)?;
            Ok(SweepRow {
                alpha,
                f1_macro: out.f1_macro,
                maee: out.maee,
                recall_macro: out.recall_macro,
                config_hash: cfg.hash(),
            })
        })
        .collect()
}

/// `start:end:step` or a comma-separated list. Range points are rounded to
/// 12 decimals so `0:1:0.1` yields `0.3`, not `0.30000000000000004`.
pub fn parse_alpha_spec(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| SemiseError::Config(format!("alpha spec '{spec}': {m}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("'{s}' is not a number")));
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:step"));
        }
        let (start, end, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || end < start {
            return Err(bad("need step > 0 and end >= start"));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<f64>>>()?
    };
    if values.is_empty() {
        return Err(bad("no values"));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(bad(&format!("{v} outside [0, 1]")));
    }
    Ok(values)
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wr = lf_writer(w);
    wr.write_record(SWEEP_CSV_COLUMNS)?;
    for r in rows {
        wr.write_record([
            r.alpha.to_string(),
            r.f1_macro.to_string(),
            r.maee.to_string(),
            r.recall_macro.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
