//! Result tables and their CSV files.
//!
//! Floats are written in the shortest representation that reads back to the
//! same double, so every file round-trips exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::drive::io_error;
use crate::error::Result;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";

/// Outcome of one (method, samples, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub samples: usize,
    pub seed: u64,
    pub error_pct: f64,
    /// Mean wall-clock time per step in milliseconds, zero unless timing is
    /// enabled.
    pub cpu_ms: f64,
    /// Newton fallbacks (particle filters) or covariance repairs (EKF).
    pub fallbacks: usize,
    /// `ok`, or the error message of a failed run.
    pub status: String,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub samples: usize,
    pub mean_error_pct: f64,
    pub std_error_pct: f64,
    pub mean_cpu_ms: f64,
}

/// Mean and sample standard deviation (zero for a single value, NaN for none).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One summary row per (method, samples) in order of first appearance, over
/// the successful runs.
pub fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in runs {
        let key = (r.method.clone(), r.samples);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, samples)| {
            let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.method == method && r.samples == samples && r.ok()).collect();
            let errors: Vec<f64> = ok.iter().map(|r| r.error_pct).collect();
            let times: Vec<f64> = ok.iter().map(|r| r.cpu_ms).collect();
            let (mean_error_pct, std_error_pct) = mean_std(&errors);
            SummaryRow {
                method,
                samples,
                mean_error_pct,
                std_error_pct,
                mean_cpu_ms: mean_std(&times).0,
            }
        })
        .collect()
}

pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io_error)?;
    for r in rows {
        w.serialize(r).map_err(io_error)?;
    }
    w.flush().map_err(io_error)
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(io_error)?;
    r.deserialize().map(|row| row.map_err(io_error)).collect()
}

/// A numeric table written to its own file, e.g. one curve of a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    /// File stem; the file is `<name>.csv`.
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_error)?;
        let mut w = csv::Writer::from_path(dir.join(self.file_name())).map_err(io_error)?;
        w.write_record(&self.header).map_err(io_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(io_error)?;
        }
        w.flush().map_err(io_error)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(io_error)?;
        let header = r.headers().map_err(io_error)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| {
                let rec = rec.map_err(io_error)?;
                rec.iter().map(|f| f.parse::<f64>().map_err(io_error)).collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { name, header, rows })
    }
}

/// Error-versus-samples and time-versus-error curves, one file per method.
pub fn emit_plot_data(summary: &[SummaryRow]) -> Vec<Series> {
    let mut methods: Vec<&str> = Vec::new();
    for s in summary {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    let mut out = Vec::new();
    for m in methods {
        let mut err = Series::new(format!("error_vs_samples_{m}"), &["samples", "mean_error_pct", "std_error_pct"]);
        let mut time = Series::new(format!("time_vs_error_{m}"), &["mean_error_pct", "mean_cpu_ms", "samples"]);
        for s in summary.iter().filter(|s| s.method == m) {
            err.push(vec![s.samples as f64, s.mean_error_pct, s.std_error_pct]);
            time.push(vec![s.mean_error_pct, s.mean_cpu_ms, s.samples as f64]);
        }
        out.push(err);
        out.push(time);
    }
    out
}

/// Formats a summary as an aligned text table.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut s = format!("{:<12} {:>8} {:>12} {:>12} {:>12}\n", "method", "samples", "error %", "std %", "cpu ms");
    for r in summary {
        s.push_str(&format!(
            "{:<12} {:>8} {:>12.3} {:>12.3} {:>12.3}\n",
            r.method, r.samples, r.mean_error_pct, r.std_error_pct, r.mean_cpu_ms
        ));
    }
    s
}
