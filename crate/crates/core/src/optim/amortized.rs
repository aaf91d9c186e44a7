use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::config::RegistrationConfig;
use super::instance::RegistrationResult;
use super::objective::{Evaluation, Objective};
use crate::condnet::{velocity_field, Tape, ToyCondUnet};
use crate::error::{Error, Result};
use crate::grid::{warp, warp_labels, LabelMap, VectorField, Volume};
use crate::losses::{LossTerms, WeightVolume};
use crate::metrics::MetricsReport;

/// One training example.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub labels: Option<(LabelMap, LabelMap)>,
}

impl TrainingPair {
    fn label_refs(&self) -> Option<(&LabelMap, &LabelMap)> {
        self.labels.as_ref().map(|(a, b)| (a, b))
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub net: ToyCondUnet,
    /// Loss terms of every step, evaluated before its update.
    pub trace: Vec<LossTerms>,
    /// η drawn at every step.
    pub etas: Vec<f64>,
}

/// How η is chosen at every training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaSampling {
    /// `η ~ U[0, η_max]`.
    Uniform,
    Fixed(f64),
}

/// Network forward pass, objective and parameter gradient for one pair.
fn step_eval(
    net: &ToyCondUnet,
    obj: &Objective,
    pair: &TrainingPair,
    cfg: &RegistrationConfig,
) -> Result<(Evaluation, WeightVolume, VectorField, Vec<f64>)> {
    let grid = *pair.moving.shape();
    let mut tape = Tape::new();
    let g = net.forward(&mut tape, &pair.moving, &pair.fixed, cfg.eta_norm())?;
    let v = velocity_field(&tape, g.velocity, grid);
    let omega = WeightVolume::new(Volume::new(grid, tape.value(g.omega).data().to_vec())?)?;
    let fields = vec![v.clone(); cfg.integrator.num_fields()];
    let eval = obj.evaluate(&fields, &omega)?;

    // The network emits one field; integrators that consume several see copies.
    let mut grad_v = vec![0.0; 3 * grid.len()];
    for gf in &eval.grad_fields {
        grad_v.iter_mut().zip(gf.data()).for_each(|(a, b)| *a += b);
    }
    let grads = tape.backward(&[(g.velocity, &grad_v), (g.omega, eval.grad_omega.data())]);
    let flat = g.params.flat_gradient(&tape, &grads);
    Ok((eval, omega, v, flat))
}

/// Trains the toy conditional network with η sampled per step.
pub fn train_amortized(
    pairs: &[TrainingPair],
    cfg: &RegistrationConfig,
    sampling: EtaSampling,
) -> Result<TrainResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("amortized training needs at least one pair".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ToyCondUnet::new(rng.random());
    let mut flat = net.params().flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut etas = Vec::with_capacity(cfg.iters);

    for it in 0..cfg.iters {
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let eta = match sampling {
            EtaSampling::Uniform => rng.random_range(0.0..=cfg.eta_max),
            EtaSampling::Fixed(eta) => eta,
        };
        let step_cfg = RegistrationConfig { eta, ..cfg.clone() };
        let obj = Objective::new(&pair.moving, &pair.fixed, pair.label_refs(), &step_cfg)?;
        let (eval, _, _, grad) = step_eval(&net, &obj, pair, &step_cfg)?;
        trace.push(eval.terms);
        etas.push(eta);
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
        net.params_mut().load_flat(&flat)?;
    }
    Ok(TrainResult { net, trace, etas })
}

/// Registers one pair with a trained network at `cfg.eta`.
pub fn predict_amortized(
    net: &ToyCondUnet,
    moving: &Volume,
    fixed: &Volume,
    labels: Option<(&LabelMap, &LabelMap)>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let pair = TrainingPair {
        moving: moving.clone(),
        fixed: fixed.clone(),
        labels: labels.map(|(a, b)| (a.clone(), b.clone())),
    };
    let obj = Objective::new(moving, fixed, labels, cfg)?;
    let (eval, omega, v, _) = step_eval(net, &obj, &pair, cfg)?;
    let velocity: Vec<VectorField> = vec![v; cfg.integrator.num_fields()];
    let u = eval.displacement;
    let warped_labels = labels.map(|(lm, _)| warp_labels(lm, &u)).transpose()?;
    let metrics = MetricsReport::evaluate(&u, warped_labels.as_ref().zip(labels.map(|l| l.1)))?;
    Ok(RegistrationResult {
        warped: warp(moving, &u)?,
        displacement: u,
        velocity,
        omega,
        warped_labels,
        trace: vec![eval.terms],
        metrics,
    })
}
