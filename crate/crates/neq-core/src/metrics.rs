//! Per-epoch metrics and their CSV serialization.
//!
//! The CSV schema is identical for every policy so runs are directly
//! comparable. Wall-clock time is measured per epoch but kept out of the
//! CSV: the file must be byte-identical across repeated runs of the same
//! (config, seed).

use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,bprop_flops_mean,bprop_flops_std,updated_neurons,updated_fraction,train_loss,test_accuracy,learning_rate";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u64,
    /// Mean backward FLOPs per iteration over the epoch.
    pub bprop_flops_mean: f64,
    pub bprop_flops_std: f64,
    pub updated_neurons: usize,
    pub updated_fraction: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub learning_rate: f64,
    /// Measured wall time; written to the run-info sidecar, not the CSV.
    pub wall_seconds: f64,
}

pub fn render_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.bprop_flops_mean,
            r.bprop_flops_std,
            r.updated_neurons,
            r.updated_fraction,
            r.train_loss,
            r.test_accuracy,
            r.learning_rate
        ));
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Training("refusing to write an empty metrics log".into()));
    }
    std::fs::write(path, render_csv(records)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Dataset("empty metrics CSV".into()))?;
    if header != CSV_HEADER {
        return Err(Error::Dataset(format!("unexpected metrics header `{header}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Dataset(format!("metrics row {} has {} fields", i + 2, fields.len())));
        }
        let f = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| Error::Dataset(format!("bad number `{}` in row {}", fields[j], i + 2)))
        };
        out.push(MetricsRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Dataset(format!("bad epoch `{}`", fields[0])))?,
            bprop_flops_mean: f(1)?,
            bprop_flops_std: f(2)?,
            updated_neurons: fields[3]
                .parse()
                .map_err(|_| Error::Dataset(format!("bad count `{}`", fields[3])))?,
            updated_fraction: f(4)?,
            train_loss: f(5)?,
            test_accuracy: f(6)?,
            learning_rate: f(7)?,
            wall_seconds: 0.0,
        });
    }
    Ok(out)
}

/// Mean updated fraction over the early window (epochs 2 through 10% of the
/// run) and the late window (final 10% of epochs). A converged equilibrium
/// run shows late < early.
pub fn updated_fraction_trend(records: &[MetricsRecord]) -> Option<(f64, f64)> {
    let total = records.len() as u64;
    if total < 3 {
        return None;
    }
    let window = (total / 10).max(1);
    let early_hi = (2 + window - 1).min(total);
    let early: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch >= 2 && r.epoch <= early_hi)
        .map(|r| r.updated_fraction)
        .collect();
    let late: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch > total - window)
        .map(|r| r.updated_fraction)
        .collect();
    if early.is_empty() || late.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((mean(&early), mean(&late)))
}
