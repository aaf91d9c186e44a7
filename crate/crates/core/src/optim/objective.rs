use super::config::RegistrationConfig;
use crate::diffeo::Flow;
use crate::error::{Error, Result};
use crate::grid::{
    check_same, resample_raw, resample_raw_adjoint, warp, warp_gradient, FieldKind, GridShape, LabelMap,
    VectorField, Volume,
};
use crate::losses::{
    local_ncc, log_loss, soft_dice_loss, weighted_diffusion_energy, LossTerms, WeightVolume,
};

/// Shape of the weight logits for a given image grid: a quarter of each
/// extent, rounded up, and at least 2.
pub fn logit_shape(grid: &GridShape) -> GridShape {
    let q = |n: usize| n.div_ceil(4).max(2);
    GridShape::with_spacing(q(grid.h), q(grid.w), q(grid.d), grid.spacing).expect("extents >= 2")
}

/// `ω = upsample(sigmoid(s))` from low-resolution logits.
pub fn weights_from_logits(logits: &Volume, grid: &GridShape) -> Result<WeightVolume> {
    let sig: Vec<f64> = logits.data().iter().map(|&s| crate::condnet::sigmoid(s)).collect();
    let up = resample_raw(&sig, logits.shape().dims_xyz(), grid.dims_xyz());
    WeightVolume::new(Volume::new(*grid, up)?)
}

/// Chain rule from a full-resolution weight gradient back to the logits.
pub fn logits_backward(logits: &Volume, grid: &GridShape, grad_omega: &Volume) -> Volume {
    let back = resample_raw_adjoint(grad_omega.data(), logits.shape().dims_xyz(), grid.dims_xyz());
    let data = back
        .iter()
        .zip(logits.data())
        .map(|(g, &s)| {
            let y = crate::condnet::sigmoid(s);
            g * y * (1.0 - y)
        })
        .collect();
    Volume::from_raw(*logits.shape(), data)
}

/// One evaluation of the objective and its gradients.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub displacement: VectorField,
    pub warped: Volume,
    /// Gradient with respect to each integrator input field.
    pub grad_fields: Vec<VectorField>,
    /// Gradient with respect to the full-resolution weight volume.
    pub grad_omega: Volume,
}

/// `sim + λ·reg + η·log` for one image pair.
///
/// `reg` is the weighted diffusion energy averaged over the grid, which keeps
/// `λ` on the same per-voxel scale as the similarity and log terms.
#[derive(Clone, Debug)]
pub struct Objective {
    moving: Volume,
    fixed: Volume,
    onehots: Option<(Vec<Volume>, Vec<Volume>)>,
    cfg: RegistrationConfig,
}

impl Objective {
    pub fn new(
        moving: &Volume,
        fixed: &Volume,
        labels: Option<(&LabelMap, &LabelMap)>,
        cfg: &RegistrationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_same(moving.shape(), fixed.shape(), "moving/fixed")?;
        let onehots = match labels {
            Some((lm, lf)) if cfg.use_dice => {
                check_same(moving.shape(), lm.shape(), "moving labels")?;
                check_same(moving.shape(), lf.shape(), "fixed labels")?;
                let mut ids = lm.labels();
                ids.extend(lf.labels());
                ids.sort_unstable();
                ids.dedup();
                ids.retain(|&l| l != 0);
                if ids.is_empty() {
                    None
                } else {
                    Some((
                        ids.iter().map(|&l| lm.one_hot(l)).collect(),
                        ids.iter().map(|&l| lf.one_hot(l)).collect(),
                    ))
                }
            }
            None if cfg.use_dice => {
                return Err(Error::InvalidArgument("Dice supervision needs label maps".into()))
            }
            _ => None,
        };
        Ok(Self {
            moving: moving.clone(),
            fixed: fixed.clone(),
            onehots,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &GridShape {
        self.moving.shape()
    }

    /// Evaluates the objective at the given integrator inputs and weights.
    pub fn evaluate(&self, fields: &[VectorField], omega: &WeightVolume) -> Result<Evaluation> {
        let flow: Flow = self.cfg.integrator.forward(fields)?;
        check_same(self.shape(), omega.shape(), "weight volume")?;
        let u = &flow.displacement;
        let warped = warp(&self.moving, u)?;

        let (mut sim, g_warped) = local_ncc(&warped, &self.fixed, self.cfg.ncc_window)?;
        let mut grad_u = warp_gradient(&self.moving, u, &g_warped)?;
        if let Some((mov, fix)) = &self.onehots {
            let warped_oh = mov.iter().map(|m| warp(m, u)).collect::<Result<Vec<_>>>()?;
            let (d, gs) = soft_dice_loss(&warped_oh, fix)?;
            sim += d;
            for (m, g) in mov.iter().zip(&gs) {
                add_into(&mut grad_u, &warp_gradient(m, u, g)?);
            }
        }

        let n = self.shape().len() as f64;
        let (lambda, eta) = (self.cfg.lambda, self.cfg.eta);
        let (reg_sum, g_u_reg, g_omega_reg) = weighted_diffusion_energy(u, omega)?;
        let (log, g_log) = log_loss(omega, self.cfg.epsilon)?;
        let reg = reg_sum / n;
        let terms = LossTerms::assemble(sim, reg, log, lambda, eta);

        let s = lambda / n;
        if s != 0.0 {
            grad_u
                .data_mut()
                .iter_mut()
                .zip(g_u_reg.data())
                .for_each(|(g, r)| *g += s * r);
        }
        let grad_omega: Vec<f64> = g_omega_reg
            .data()
            .iter()
            .zip(g_log.data())
            .map(|(r, l)| s * r + eta * l)
            .collect();

        let grad_fields = flow.backward(&grad_u);
        Ok(Evaluation {
            terms,
            displacement: flow.displacement,
            warped,
            grad_fields,
            grad_omega: Volume::from_raw(*self.shape(), grad_omega),
        })
    }
}

fn add_into(acc: &mut VectorField, g: &VectorField) {
    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
}

/// Flat parameter vector of instance optimization: the integrator input
/// fields followed by the weight logits.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceParams {
    pub fields: Vec<VectorField>,
    pub logits: Volume,
}

impl InstanceParams {
    pub fn zeros(grid: &GridShape, num_fields: usize) -> Self {
        Self {
            fields: vec![VectorField::zeros(*grid, FieldKind::Velocity); num_fields],
            logits: Volume::zeros(logit_shape(grid)),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.fields.iter().flat_map(|f| f.data().iter().copied()).collect();
        out.extend_from_slice(self.logits.data());
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for f in &mut self.fields {
            let n = f.data().len();
            f.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.logits.data_mut().copy_from_slice(&flat[off..]);
    }
}

/// Objective value and flat gradient with respect to [`InstanceParams`].
/// With `learn_weights` off, `ω ≡ 1` and the logit gradient is zero.
pub fn instance_objective(obj: &Objective, params: &InstanceParams) -> Result<(Evaluation, WeightVolume, Vec<f64>)> {
    let grid = *obj.shape();
    let omega = if obj.cfg.learn_weights {
        weights_from_logits(&params.logits, &grid)?
    } else {
        WeightVolume::filled(grid, 1.0)?
    };
    let eval = obj.evaluate(&params.fields, &omega)?;
    let mut flat: Vec<f64> = eval
        .grad_fields
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .collect();
    if obj.cfg.learn_weights {
        flat.extend_from_slice(logits_backward(&params.logits, &grid, &eval.grad_omega).data());
    } else {
        flat.extend(std::iter::repeat_n(0.0, params.logits.data().len()));
    }
    Ok((eval, omega, flat))
}
