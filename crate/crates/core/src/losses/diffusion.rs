//! Diffusion (squared-gradient) energies and the grid-graph Laplacian.
//!
//! Spatial gradients are forward differences; the difference leaving the grid
//! at the last index of an axis is zero. With this convention the energy is
//! exactly the quadratic form of the 6-neighbourhood graph Laplacian.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::{check_same, par_sum, GridShape, VectorField, Volume};
use crate::losses::WeightVolume;

/// `‖∇u(p)‖²` summed over components and axes, at voxel `i`.
#[inline]
fn sq_grad_norm(u: &VectorField, shape: &GridShape, i: usize) -> f64 {
    let p = shape.coords(i);
    let dims = shape.dims_xyz();
    let mut s = 0.0;
    for c in 0..3 {
        let comp = u.component(c);
        for a in 0..3 {
            if p[a] + 1 < dims[a] {
                let d = comp[i + shape.stride(a)] - comp[i];
                s += d * d;
            }
        }
    }
    s
}

/// Per-voxel squared gradient norm `‖∇u(p)‖²`.
pub fn squared_gradient_norm(u: &VectorField) -> Volume {
    let shape = *u.shape();
    let data = (0..shape.len())
        .into_par_iter()
        .map(|i| sq_grad_norm(u, &shape, i))
        .collect();
    Volume::from_raw(shape, data)
}

/// Gradient of `Σ_p w(p)‖∇u(p)‖²` with respect to `u`; `w = None` means 1.
fn weighted_grad(u: &VectorField, weight: Option<&[f64]>) -> VectorField {
    let shape = *u.shape();
    let n = shape.len();
    let dims = shape.dims_xyz();
    let w = |i: usize| weight.map_or(1.0, |w| w[i]);
    let mut out = vec![0.0; 3 * n];
    out.par_chunks_mut(n).enumerate().for_each(|(c, g)| {
        let comp = u.component(c);
        for (q, gq) in g.iter_mut().enumerate() {
            let p = shape.coords(q);
            let mut acc = 0.0;
            for a in 0..3 {
                let st = shape.stride(a);
                if p[a] > 0 {
                    let prev = q - st;
                    acc += 2.0 * w(prev) * (comp[q] - comp[prev]);
                }
                if p[a] + 1 < dims[a] {
                    acc -= 2.0 * w(q) * (comp[q + st] - comp[q]);
                }
            }
            *gq = acc;
        }
    });
    VectorField::from_raw(shape, u.kind(), out)
}

/// `Σ_p ‖∇u(p)‖²` and its gradient with respect to `u`.
pub fn diffusion_energy(u: &VectorField) -> (f64, VectorField) {
    let shape = *u.shape();
    let value = par_sum(shape.len(), |i| sq_grad_norm(u, &shape, i));
    (value, weighted_grad(u, None))
}

/// `Σ_p ω(p)‖∇u(p)‖²` with gradients with respect to `u` and `ω`.
pub fn weighted_diffusion_energy(
    u: &VectorField,
    omega: &WeightVolume,
) -> Result<(f64, VectorField, Volume)> {
    check_same(u.shape(), omega.shape(), "weighted_diffusion_energy")?;
    let shape = *u.shape();
    let w = omega.data();
    let value = par_sum(shape.len(), |i| w[i] * sq_grad_norm(u, &shape, i));
    let grad_u = weighted_grad(u, Some(w));
    let grad_omega = squared_gradient_norm(u);
    Ok((value, grad_u, grad_omega))
}

/// Matrix-free Laplacian of the 6-neighbourhood graph on the grid.
#[derive(Clone, Copy, Debug)]
pub struct GridLaplacian {
    shape: GridShape,
}

impl GridLaplacian {
    pub fn new(shape: GridShape) -> Self {
        Self { shape }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    /// `(L x)(p) = Σ_{q ~ p} (x(p) - x(q))`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let shape = self.shape;
        let dims = shape.dims_xyz();
        assert_eq!(x.len(), shape.len(), "laplacian operand length");
        (0..shape.len())
            .into_par_iter()
            .map(|i| {
                let p = shape.coords(i);
                let mut acc = 0.0;
                for a in 0..3 {
                    let st = shape.stride(a);
                    if p[a] > 0 {
                        acc += x[i] - x[i - st];
                    }
                    if p[a] + 1 < dims[a] {
                        acc += x[i] - x[i + st];
                    }
                }
                acc
            })
            .collect()
    }

    /// `xᵀ L x` for a scalar channel.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let lx = self.apply(x);
        par_sum(x.len(), |i| x[i] * lx[i])
    }
}

/// `Σ_c u_cᵀ (L u_c)`.
pub fn laplacian_quadratic_form(u: &VectorField) -> f64 {
    let lap = GridLaplacian::new(*u.shape());
    (0..3).map(|c| lap.quadratic_form(u.component(c))).sum()
}
