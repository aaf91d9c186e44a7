//! Deformations from velocity fields.
//!
//! [`exp_ss`] exponentiates a stationary velocity field by scaling and
//! squaring; [`integrate_tvf`] composes `T` small steps, one per velocity
//! field. Both keep their intermediates in a [`Flow`] so the optimizer can run
//! the reverse pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_same, compose_backward, compose_unchecked, FieldKind, VectorField, Volume};

pub const DEFAULT_TIME_STEPS: usize = 7;
pub const DEFAULT_SS_STEPS: usize = 7;

/// How parameters (velocity fields) become a displacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Integrator {
    /// The single parameter field is the displacement.
    Direct,
    /// `T` velocity fields composed as `(id + v_T/T) ∘ … ∘ (id + v_1/T)`.
    TimeStepped { steps: usize },
    /// One stationary velocity field, exponentiated with `K` squarings.
    ScalingSquaring { steps: usize },
    /// `T` velocity fields, each step exponentiated with `K` squarings.
    TimeSteppedSs { time_steps: usize, ss_steps: usize },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::ScalingSquaring {
            steps: DEFAULT_SS_STEPS,
        }
    }
}

impl Integrator {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Integrator::Direct => true,
            Integrator::TimeStepped { steps } | Integrator::ScalingSquaring { steps } => steps >= 1,
            Integrator::TimeSteppedSs {
                time_steps,
                ss_steps,
            } => time_steps >= 1 && ss_steps >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("integrator step counts must be >= 1: {self:?}")))
        }
    }

    /// Number of parameter fields the integrator consumes.
    pub fn num_fields(&self) -> usize {
        match *self {
            Integrator::Direct | Integrator::ScalingSquaring { .. } => 1,
            Integrator::TimeStepped { steps } => steps,
            Integrator::TimeSteppedSs { time_steps, .. } => time_steps,
        }
    }

    /// True when every step is a scaling-and-squaring exponential.
    pub fn is_diffeomorphic(&self) -> bool {
        matches!(
            self,
            Integrator::ScalingSquaring { .. } | Integrator::TimeSteppedSs { .. }
        )
    }

    pub fn forward(&self, fields: &[VectorField]) -> Result<Flow> {
        self.validate()?;
        if fields.len() != self.num_fields() {
            return Err(Error::InvalidArgument(format!(
                "{:?} expects {} fields, got {}",
                self,
                self.num_fields(),
                fields.len()
            )));
        }
        for f in fields {
            check_same(fields[0].shape(), f.shape(), "integrator inputs")?;
        }
        match *self {
            Integrator::Direct => Ok(Flow {
                displacement: fields[0].clone().with_kind(FieldKind::Displacement),
                cache: FlowCache::Direct,
            }),
            Integrator::ScalingSquaring { steps } => {
                let ss = SsTrace::forward(&fields[0], steps);
                Ok(Flow {
                    displacement: ss.output().clone(),
                    cache: FlowCache::Ss(ss),
                })
            }
            Integrator::TimeStepped { steps } => Ok(tvf_forward(fields, steps, None)),
            Integrator::TimeSteppedSs {
                time_steps,
                ss_steps,
            } => Ok(tvf_forward(fields, time_steps, Some(ss_steps))),
        }
    }
}

/// Squaring intermediates `u_0 = v / 2^K, u_{k+1} = u_k ∘ u_k`.
#[derive(Clone, Debug)]
struct SsTrace {
    states: Vec<VectorField>,
    scale: f64,
}

impl SsTrace {
    fn forward(v: &VectorField, steps: usize) -> Self {
        let scale = 0.5f64.powi(steps as i32);
        let mut states = Vec::with_capacity(steps + 1);
        states.push(v.scaled(scale).with_kind(FieldKind::Displacement));
        for k in 0..steps {
            let next = compose_unchecked(&states[k], &states[k]);
            states.push(next);
        }
        Self { states, scale }
    }

    fn output(&self) -> &VectorField {
        self.states.last().expect("at least one state")
    }

    fn backward(&self, grad: &VectorField) -> VectorField {
        let mut g = grad.clone();
        for k in (0..self.states.len() - 1).rev() {
            let u = &self.states[k];
            let (ga, gb) = compose_backward(u, u, &g).expect("shapes checked in forward");
            g = add(&ga, &gb);
        }
        g.scaled(self.scale).with_kind(FieldKind::Velocity)
    }
}

#[derive(Clone, Debug)]
enum StepMap {
    Linear,
    Ss(SsTrace),
}

#[derive(Clone, Debug)]
enum FlowCache {
    Direct,
    Ss(SsTrace),
    Tvf {
        /// Per-step displacements `s_i` and how each was produced.
        steps: Vec<(VectorField, StepMap)>,
        /// Partial compositions `φ_1 … φ_T`.
        partials: Vec<VectorField>,
        inv_t: f64,
    },
}

fn tvf_forward(fields: &[VectorField], time_steps: usize, ss: Option<usize>) -> Flow {
    let inv_t = 1.0 / time_steps as f64;
    let steps: Vec<(VectorField, StepMap)> = fields
        .iter()
        .map(|v| {
            let small = v.scaled(inv_t).with_kind(FieldKind::Displacement);
            match ss {
                None => (small, StepMap::Linear),
                Some(k) => {
                    let tr = SsTrace::forward(&small, k);
                    (tr.output().clone(), StepMap::Ss(tr))
                }
            }
        })
        .collect();
    let mut partials: Vec<VectorField> = vec![steps[0].0.clone()];
    for (s, _) in steps.iter().skip(1) {
        let next = compose_unchecked(s, partials.last().unwrap());
        partials.push(next);
    }
    Flow {
        displacement: partials.last().unwrap().clone(),
        cache: FlowCache::Tvf {
            steps,
            partials,
            inv_t,
        },
    }
}

/// Result of integrating velocity fields, with what the reverse pass needs.
#[derive(Clone, Debug)]
pub struct Flow {
    pub displacement: VectorField,
    cache: FlowCache,
}

impl Flow {
    /// Maps a gradient on the displacement back to the parameter fields.
    pub fn backward(&self, grad_u: &VectorField) -> Vec<VectorField> {
        match &self.cache {
            FlowCache::Direct => vec![grad_u.clone().with_kind(FieldKind::Velocity)],
            FlowCache::Ss(tr) => vec![tr.backward(grad_u)],
            FlowCache::Tvf {
                steps,
                partials,
                inv_t,
            } => {
                let t = steps.len();
                let mut step_grads = vec![None; t];
                let mut g = grad_u.clone();
                for i in (1..t).rev() {
                    let (ga, gb) =
                        compose_backward(&steps[i].0, &partials[i - 1], &g).expect("shapes checked");
                    step_grads[i] = Some(ga);
                    g = gb;
                }
                step_grads[0] = Some(g);
                step_grads
                    .into_iter()
                    .zip(steps)
                    .map(|(gs, (_, map))| {
                        let gs = gs.unwrap();
                        let gs = match map {
                            StepMap::Linear => gs,
                            StepMap::Ss(tr) => tr.backward(&gs),
                        };
                        gs.scaled(*inv_t).with_kind(FieldKind::Velocity)
                    })
                    .collect()
            }
        }
    }
}

fn add(a: &VectorField, b: &VectorField) -> VectorField {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    VectorField::from_raw(*a.shape(), a.kind(), data)
}

/// Scaling and squaring: `u_0 = v / 2^K`, then `K` times `u ← u ∘ u`.
pub fn exp_ss(v: &VectorField, steps: usize) -> Result<VectorField> {
    if v.kind() != FieldKind::Velocity {
        return Err(Error::InvalidArgument(format!(
            "exp_ss expects a velocity field, got {:?}",
            v.kind()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("exp_ss needs at least one squaring".into()));
    }
    Ok(SsTrace::forward(v, steps).output().clone())
}

/// `(id + v_T/T) ∘ … ∘ (id + v_1/T) - id`.
pub fn integrate_tvf(fields: &[VectorField]) -> Result<VectorField> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("integrate_tvf needs at least one field".into()));
    }
    Ok(Integrator::TimeStepped {
        steps: fields.len(),
    }
    .forward(fields)?
    .displacement)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffScheme {
    Forward,
    Central,
}

/// Partial derivatives `∂u_c/∂x_a` at voxel `i`, one-sided at the border.
pub(crate) fn displacement_jacobian(u: &VectorField, i: usize, scheme: DiffScheme) -> [[f64; 3]; 3] {
    let shape = u.shape();
    let p = shape.coords(i);
    let dims = shape.dims_xyz();
    let mut m = [[0.0; 3]; 3];
    for (c, row) in m.iter_mut().enumerate() {
        let comp = u.component(c);
        for a in 0..3 {
            let st = shape.stride(a);
            let has_next = p[a] + 1 < dims[a];
            let has_prev = p[a] > 0;
            row[a] = match scheme {
                DiffScheme::Central if has_next && has_prev => (comp[i + st] - comp[i - st]) / 2.0,
                _ if has_next => comp[i + st] - comp[i],
                _ => comp[i] - comp[i - st],
            };
        }
    }
    m
}

pub(crate) fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `det(I + ∂u/∂p)` per voxel.
pub fn jacobian_determinants(u: &VectorField, scheme: DiffScheme) -> Volume {
    let shape = *u.shape();
    let data = (0..shape.len())
        .map(|i| {
            let mut m = displacement_jacobian(u, i, scheme);
            for (k, row) in m.iter_mut().enumerate() {
                row[k] += 1.0;
            }
            det3(m)
        })
        .collect();
    Volume::from_raw(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    #[test]
    fn zero_velocity_gives_identity() {
        let s = GridShape::cube(6).unwrap();
        let v = VectorField::zeros(s, FieldKind::Velocity);
        let u = exp_ss(&v, 7).unwrap();
        assert!(u.data().iter().all(|&x| x == 0.0));
        assert_eq!(u.kind(), FieldKind::Displacement);
        assert!(exp_ss(&v.clone().with_kind(FieldKind::Displacement), 3).is_err());
    }

    #[test]
    fn constant_velocity_is_translation() {
        let s = GridShape::cube(16).unwrap();
        let v = VectorField::constant(s, FieldKind::Velocity, [1.25, -0.5, 0.75]);
        let u = exp_ss(&v, 6).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..s.len() {
            if s.on_border(i) {
                continue;
            }
            let got = u.at(i);
            for (g, e) in got.iter().zip([1.25, -0.5, 0.75]) {
                worst = worst.max((g - e).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn tvf_reductions() {
        let s = GridShape::cube(5).unwrap();
        let zeros = vec![VectorField::zeros(s, FieldKind::Velocity); 3];
        assert!(integrate_tvf(&zeros).unwrap().data().iter().all(|&x| x == 0.0));
        let v = VectorField::from_fn(s, FieldKind::Velocity, |x, y, z| {
            [0.1 * y as f64, -0.05 * z as f64, 0.02 * x as f64]
        });
        let u = integrate_tvf(std::slice::from_ref(&v)).unwrap();
        assert_eq!(u.data(), v.data());
        assert!(integrate_tvf(&[]).is_err());
    }

    #[test]
    fn analytic_jacobians() {
        let s = GridShape::cube(6).unwrap();
        for scheme in [DiffScheme::Forward, DiffScheme::Central] {
            let zero = VectorField::zeros(s, FieldKind::Displacement);
            assert!(jacobian_determinants(&zero, scheme).data().iter().all(|&d| d == 1.0));

            let dil = VectorField::from_fn(s, FieldKind::Displacement, |x, y, z| {
                [0.1 * x as f64, 0.1 * y as f64, 0.1 * z as f64]
            });
            let det = jacobian_determinants(&dil, scheme);
            assert!(det.data().iter().all(|d| (d - 1.331).abs() < 1e-12));

            let fold = VectorField::from_fn(s, FieldKind::Displacement, |x, _, _| [-2.0 * x as f64, 0.0, 0.0]);
            assert!(jacobian_determinants(&fold, scheme).data().iter().all(|&d| d == -1.0));
        }
    }

    #[test]
    fn integrator_validation() {
        assert!(Integrator::ScalingSquaring { steps: 0 }.validate().is_err());
        let s = GridShape::cube(4).unwrap();
        let v = VectorField::zeros(s, FieldKind::Velocity);
        assert!(Integrator::TimeStepped { steps: 2 }.forward(&[v]).is_err());
    }
}
