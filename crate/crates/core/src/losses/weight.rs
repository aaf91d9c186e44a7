use crate::error::{Error, Result};
use crate::grid::{par_sum, GridShape, Volume};

/// Per-voxel regularization weight, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVolume(Volume);

impl WeightVolume {
    pub fn new(vol: Volume) -> Result<Self> {
        if let Some((i, v)) = vol
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "weight {v} at voxel {i} is outside [0, 1]"
            )));
        }
        Ok(Self(vol))
    }

    pub fn filled(shape: GridShape, value: f64) -> Result<Self> {
        Self::new(Volume::filled(shape, value))
    }

    pub fn shape(&self) -> &GridShape {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }

    /// Mean weight over the voxels selected by `mask`.
    pub fn masked_mean(&self, mask: &[bool]) -> Option<f64> {
        let (sum, count) = self
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (w, _)| (s + w, c + 1));
        (count > 0).then(|| sum / count as f64)
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Normalized log penalty on small weights.
///
/// `ω̂ = clamp(ω, ε, 1)` and the loss is `mean_p log(ω̂(p)) / log(ε)`, which is
/// 0 when every weight is 1 and 1 when every weight sits at `ε`. The gradient
/// is zero wherever the clamp is active.
pub fn log_loss(omega: &WeightVolume, epsilon: f64) -> Result<(f64, Volume)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "log-loss epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let w = omega.data();
    let n = w.len() as f64;
    let log_eps = epsilon.ln();
    let clamp = |v: f64| v.clamp(epsilon, 1.0);
    // `+ 0.0` turns the -0 produced by ω ≡ 1 into +0.
    let value = (par_sum(w.len(), |i| clamp(w[i]).ln()) / n) / log_eps + 0.0;
    let grad = w
        .iter()
        .map(|&v| {
            if v > epsilon && v <= 1.0 {
                1.0 / (v * log_eps * n)
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, Volume::from_raw(*omega.shape(), grad)))
}
