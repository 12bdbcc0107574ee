//! Report files and the aggregated results table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::downstream::{EvalReport, Protocol};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const RESULTS_TABLE: &str = "results_table.csv";

impl EvalReport {
    pub fn file_name(&self) -> String {
        format!("report_{}_f{}_seed{}.json", self.protocol.as_str(), self.label_fraction, self.seed)
    }

    /// Write the report as pretty JSON into `dir`; returns its path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

/// Every `report_*.json` in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean±std` of fractions, printed as percentages.
pub fn pct(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub protocol: String,
    pub label_fraction: f64,
    pub seeds: usize,
    #[serde(rename = "ACC")]
    pub acc: String,
    #[serde(rename = "MF1")]
    pub mf1: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub mf1_mean: f64,
    pub mf1_std: f64,
    pub config_hash: String,
}

/// One row per (protocol, label fraction, config hash), over seeds.
pub fn aggregate(reports: &[EvalReport]) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(Protocol, u64, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.protocol, r.label_fraction.to_bits(), r.config_hash.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((protocol, frac, hash), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let mf1: Vec<f64> = rs.iter().map(|r| r.macro_f1).collect();
            let (am, asd) = mean_std(&acc);
            let (fm, fsd) = mean_std(&mf1);
            ResultRow {
                method: protocol.method().to_string(),
                protocol: protocol.as_str().to_string(),
                label_fraction: f64::from_bits(frac),
                seeds: rs.len(),
                acc: pct(am, asd),
                mf1: pct(fm, fsd),
                acc_mean: am,
                acc_std: asd,
                mf1_mean: fm,
                mf1_std: fsd,
                config_hash: hash,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Rebuild `results_table.csv` in `dir` from every report stored there.
pub fn refresh_results_table(dir: &Path) -> Result<PathBuf> {
    let rows = aggregate(&load_reports(dir)?);
    let path = dir.join(RESULTS_TABLE);
    write_csv(&path, &rows)?;
    Ok(path)
}
