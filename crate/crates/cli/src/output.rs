//! Writers for traces and reports, plus run summary statistics.

use std::fs;
use std::path::{Path, PathBuf};

use inloop::meta::Trace;
use serde::Serialize;

use crate::error::Result;

pub fn write_trace(trace: &Trace, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trace.header())?;
    for record in trace.records() {
        w.write_record(record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Output directory of one seed: the root itself for single runs.
pub fn run_dir(root: &Path, seed: u64, runs: usize) -> PathBuf {
    if runs > 1 {
        root.join(format!("seed-{seed}"))
    } else {
        root.to_path_buf()
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// Mean with a normal-approximation 95% interval half-width
/// `1.96·s/√n` (sample std; zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci95: f64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, ci95: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
        }
    }
}
