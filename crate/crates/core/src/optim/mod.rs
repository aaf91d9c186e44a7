//! Adam, the objective with analytic gradients, and the registration drivers:
//! per-pair instance optimization, amortized training of the conditional
//! network, and the η sweep.

mod adam;
mod amortized;
mod config;
mod instance;
mod objective;
mod sweep;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use amortized::{predict_amortized, train_amortized, EtaSampling, TrainResult, TrainingPair};
pub use config::{Mode, RegistrationConfig, DEFAULT_ETA_MAX, DEFAULT_LAMBDA, DEFAULT_NCC_WINDOW};
pub use instance::{register_instance, RegistrationResult};
pub use objective::{
    instance_objective, logit_shape, logits_backward, weights_from_logits, Evaluation, InstanceParams,
    Objective,
};
pub use sweep::{eta_grid, select_best, sweep_eta, SweepRow, SweepTable, DEFAULT_ETA_STEP};
