use serde::{Deserialize, Serialize};

use super::adam::DEFAULT_LR;
use crate::diffeo::Integrator;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_EPSILON;

pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_NCC_WINDOW: usize = 9;
pub const DEFAULT_ETA_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    InstanceOpt,
    Amortized,
}

/// Hyperparameters of one registration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub lambda: f64,
    pub eta: f64,
    pub epsilon: f64,
    /// Upper end of the η range, used to normalize η for the network.
    pub eta_max: f64,
    pub integrator: Integrator,
    pub ncc_window: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub use_dice: bool,
    pub mode: Mode,
    /// Optimize the weight volume; when off, `ω ≡ 1`.
    pub learn_weights: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            eta: 0.0,
            epsilon: DEFAULT_EPSILON,
            eta_max: DEFAULT_ETA_MAX,
            integrator: Integrator::default(),
            ncc_window: DEFAULT_NCC_WINDOW,
            iters: 100,
            lr: DEFAULT_LR,
            seed: 0,
            use_dice: false,
            mode: Mode::InstanceOpt,
            learn_weights: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.eta_max > 0.0 && self.eta_max.is_finite()) {
            return bad(format!("eta_max must be finite and > 0, got {}", self.eta_max));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if self.ncc_window == 0 || self.ncc_window.is_multiple_of(2) {
            return bad(format!("ncc_window must be a positive odd integer, got {}", self.ncc_window));
        }
        self.integrator.validate()
    }

    /// `η / η_max` clamped to `[0, 1]`.
    pub fn eta_norm(&self) -> f64 {
        (self.eta / self.eta_max).clamp(0.0, 1.0)
    }
}
