use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::metrics::MetricsReport;
use crate::optim::{RegistrationConfig, SweepRow};

/// Contents of `metrics.json`. Every key is always present; missing
/// quantities are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub iterations: Option<usize>,
    pub mean_omega: Option<f64>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

impl MetricsFile {
    pub fn from_run(cfg: &RegistrationConfig, mean_omega: f64, metrics: MetricsReport) -> Self {
        Self {
            seed: Some(cfg.seed),
            eta: Some(cfg.eta),
            lambda: Some(cfg.lambda),
            iterations: Some(cfg.iters),
            mean_omega: Some(mean_omega),
            metrics,
        }
    }

    pub fn metrics_only(metrics: MetricsReport) -> Self {
        Self {
            seed: None,
            eta: None,
            lambda: None,
            iterations: None,
            mean_omega: None,
            metrics,
        }
    }
}

pub fn write_metrics_json(path: impl AsRef<Path>, report: &MetricsFile) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: impl AsRef<Path>) -> Result<MetricsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    sim: f64,
    reg: f64,
    log: f64,
    total: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("csv {}: {other:?}", path.display())),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `iteration,sim,reg,log,total`, one row per iteration.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[LossTerms]) -> Result<()> {
    write_csv(
        path.as_ref(),
        trace.iter().enumerate().map(|(iteration, t)| TraceRow {
            iteration,
            sim: t.sim,
            reg: t.reg,
            log: t.log,
            total: t.total,
        }),
    )
}

/// `eta,dice,hd95,sdlogj,pct_nonpos,pct_ndv,mean_omega`.
pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}
