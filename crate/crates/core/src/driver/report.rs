//! Run reports: per-cell aggregation, the pinned CSV schema, and JSON
//! emission with the resolved configuration embedded.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Method;
use crate::error::{Error, Result};

/// Pinned column order of `report.csv`.
pub const REPORT_COLUMNS: [&str; 13] = [
    "method",
    "fold",
    "n_way",
    "k_shot",
    "rank",
    "iterations",
    "miou_mean",
    "miou_std",
    "delta_vs_vanilla",
    "bg_iou_mean",
    "trainable_params",
    "trainable_pct",
    "wall_ms_per_episode",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub fold: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub rank: usize,
    pub iterations: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    /// Present on non-vanilla rows: improvement over the vanilla row of
    /// the same (fold, n_way, k_shot) cell.
    pub delta_vs_vanilla: Option<f64>,
    pub bg_iou_mean: f64,
    pub trainable_params: usize,
    pub trainable_pct: f64,
    pub wall_ms_per_episode: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Exact resolved configuration (flat `key = value` text).
    pub config: String,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let delta = r
                .delta_vs_vanilla
                .map(|d| format!("{:.6}", d))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{},{:.6},{},{:.4},{:.3}",
                r.method.as_str(),
                r.fold,
                r.n_way,
                r.k_shot,
                r.rank,
                r.iterations,
                r.miou_mean,
                r.miou_std,
                delta,
                r.bg_iou_mean,
                r.trainable_params,
                r.trainable_pct,
                r.wall_ms_per_episode
            );
        }
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(out_dir)?;
        let csv_path = out_dir.join("report.csv");
        std::fs::write(&csv_path, self.to_csv())?;
        let json_path = out_dir.join("report.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report encode: {}", e)))?;
        std::fs::write(&json_path, json)?;
        Ok((csv_path, json_path))
    }

    pub fn read(path: &Path) -> Result<RunReport> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::Data(format!("report decode: {}", e)))
    }

    pub fn row(&self, method: Method, fold: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.fold == fold)
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean_std of empty slice");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
