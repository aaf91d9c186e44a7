use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RegistrationConfig;
use super::instance::register_instance;
use crate::error::{Error, Result};
use crate::grid::{LabelMap, Volume};

pub const DEFAULT_ETA_STEP: f64 = 0.05;

/// One η of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub dice: f64,
    pub hd95: f64,
    pub sdlogj: f64,
    pub pct_nonpos: f64,
    pub pct_ndv: f64,
    pub mean_omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    /// Rows sorted by ascending η.
    pub rows: Vec<SweepRow>,
    /// Index of the selected row.
    pub best: usize,
}

impl SweepTable {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// `min, min + step, …, max` with `round((max - min) / step) + 1` points.
pub fn eta_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min >= 0.0 && max >= min && step > 0.0 && max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "invalid eta grid: min {min}, max {max}, step {step}"
        )));
    }
    let n = ((max - min) / step).round() as usize + 1;
    // Rounding keeps grid points such as 0.15 free of representation noise.
    Ok((0..n)
        .map(|i| ((min + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Index of the highest-Dice row; ties go to the smallest η. NaN scores
/// never win.
pub fn select_best(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.dice.is_nan() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let rb = &rows[b];
                if r.dice > rb.dice || (r.dice == rb.dice && r.eta < rb.eta) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Runs [`register_instance`] for every η in `grid`, up to `parallel` runs at
/// a time.
pub fn sweep_eta(
    moving: &Volume,
    fixed: &Volume,
    labels: (&LabelMap, &LabelMap),
    cfg: &RegistrationConfig,
    grid: &[f64],
    parallel: usize,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("eta grid is empty".into()));
    }
    let mut etas = grid.to_vec();
    etas.sort_by(f64::total_cmp);
    let run = |&eta: &f64| -> Result<SweepRow> {
        let cfg = RegistrationConfig { eta, ..cfg.clone() };
        let r = register_instance(moving, fixed, Some(labels), &cfg)?;
        Ok(SweepRow {
            eta,
            dice: r.metrics.dice_mean.unwrap_or(f64::NAN),
            hd95: r.metrics.hd95_mean.unwrap_or(f64::NAN),
            sdlogj: r.metrics.sdlogj,
            pct_nonpos: r.metrics.pct_nonpos_jac,
            pct_ndv: r.metrics.pct_ndv,
            mean_omega: r.omega.mean(),
        })
    };
    let rows: Vec<SweepRow> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| etas.par_iter().map(run).collect::<Result<_>>())?
    } else {
        etas.iter().map(run).collect::<Result<_>>()?
    };
    let best = select_best(&rows)
        .ok_or_else(|| Error::InvalidArgument("no sweep row has a Dice score".into()))?;
    Ok(SweepTable { rows, best })
}
