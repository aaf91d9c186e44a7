use super::adam::{adam_step, AdamState};
use super::config::RegistrationConfig;
use super::objective::{instance_objective, InstanceParams, Objective};
use crate::error::{Error, Result};
use crate::grid::{warp, warp_labels, LabelMap, VectorField, Volume};
use crate::losses::{LossTerms, WeightVolume};
use crate::metrics::MetricsReport;

/// Outputs of one registration run.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Final displacement `u`, with `φ = id + u`.
    pub displacement: VectorField,
    pub velocity: Vec<VectorField>,
    pub omega: WeightVolume,
    pub warped: Volume,
    pub warped_labels: Option<LabelMap>,
    /// Loss terms at the start of every iteration.
    pub trace: Vec<LossTerms>,
    pub metrics: MetricsReport,
}

/// Registers `moving` onto `fixed` by directly optimizing the velocity
/// field(s) and the low-resolution weight logits with Adam.
pub fn register_instance(
    moving: &Volume,
    fixed: &Volume,
    labels: Option<(&LabelMap, &LabelMap)>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let obj = Objective::new(moving, fixed, labels, cfg)?;
    let grid = *moving.shape();
    let mut params = InstanceParams::zeros(&grid, cfg.integrator.num_fields());
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iters);

    for it in 0..cfg.iters {
        let (eval, _, grad) = instance_objective(&obj, &params)?;
        trace.push(eval.terms);
        if !eval.terms.is_finite() {
            return Err(Error::Diverged { iteration: it, trace });
        }
        adam_step(&mut flat, &grad, &mut adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                iteration: it,
                trace: trace.clone(),
            },
            other => other,
        })?;
        params.load_flat(&flat);
    }

    let (eval, omega, _) = instance_objective(&obj, &params)?;
    if !eval.terms.is_finite() {
        return Err(Error::Diverged {
            iteration: cfg.iters,
            trace,
        });
    }
    let u = eval.displacement;
    let warped_labels = labels.map(|(lm, _)| warp_labels(lm, &u)).transpose()?;
    let metrics = MetricsReport::evaluate(&u, warped_labels.as_ref().zip(labels.map(|l| l.1)))?;
    Ok(RegistrationResult {
        warped: warp(moving, &u)?,
        displacement: u,
        velocity: params.fields,
        omega,
        warped_labels,
        trace,
        metrics,
    })
}
