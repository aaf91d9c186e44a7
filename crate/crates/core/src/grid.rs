//! Grid geometry, volumes, vector fields and the spatial transformer.
//!
//! Memory layout is x-fastest everywhere: the voxel `(x, y, z)` lives at
//! `x + w * (y + h * z)`, with `x < w`, `y < h`, `z < d`. Vector fields are
//! stored component-planar: component `c` (0 = x, 1 = y, 2 = z) occupies
//! `data[c * n .. (c + 1) * n]`.
//!
//! Coordinates and displacements are in voxel units. Out-of-grid samples are
//! border-clamped for intensities and fields alike.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Physical voxel size in `(h, w, d)` order. Carried for reporting only.
    pub spacing: [f64; 3],
}

impl GridShape {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        Self::with_spacing(h, w, d, [1.0; 3])
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn with_spacing(h: usize, w: usize, d: usize, spacing: [f64; 3]) -> Result<Self> {
        if h < 2 || w < 2 || d < 2 {
            return Err(Error::InvalidShape(format!(
                "every axis needs at least two samples, got {h}x{w}x{d}"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidShape(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { h, w, d, spacing })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axis extents in `(x, y, z)` order.
    #[inline]
    pub fn dims_xyz(&self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        [x, y, z]
    }

    /// Index stride along axis `a` (0 = x, 1 = y, 2 = z).
    #[inline]
    pub fn stride(&self, a: usize) -> usize {
        match a {
            0 => 1,
            1 => self.w,
            _ => self.w * self.h,
        }
    }

    /// Same voxel counts per axis; spacing is ignored.
    pub fn same_dims(&self, other: &GridShape) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }

    /// True when the voxel touches the grid border on any axis.
    #[inline]
    pub fn on_border(&self, i: usize) -> bool {
        let [x, y, z] = self.coords(i);
        let [nx, ny, nz] = self.dims_xyz();
        x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1
    }
}

pub(crate) fn check_same(a: &GridShape, b: &GridShape, what: &str) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.d, b.h, b.w, b.d
        )))
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} at element {i}"))),
        None => Ok(()),
    }
}

/// Scalar 3D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: GridShape,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                shape.len()
            )));
        }
        check_finite(&data, "volume")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: GridShape, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = (0..shape.len())
            .map(|i| {
                let [x, y, z] = shape.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { shape, data }
    }

    pub(crate) fn from_raw(shape: GridShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.shape.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        par_sum(self.data.len(), |i| self.data[i]) / self.data.len() as f64
    }
}

/// Integer label map. Resampled with nearest neighbour only.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: GridShape,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: GridShape, data: Vec<u32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "label data has {} values, grid needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn from_fn(shape: GridShape, f: impl Fn(usize, usize, usize) -> u32) -> Self {
        let data = (0..shape.len())
            .map(|i| {
                let [x, y, z] = shape.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { shape, data }
    }

    /// Converts an intensity volume holding non-negative integers.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let data = vol
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "label value {v} at voxel {i} is not a non-negative integer"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape: *vol.shape(),
            data,
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_raw(self.shape, self.data.iter().map(|&l| l as f64).collect())
    }

    #[inline]
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.shape.index(x, y, z)]
    }

    /// Sorted non-zero labels present in the map.
    pub fn labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Indicator volume of one label.
    pub fn one_hot(&self, label: u32) -> Volume {
        Volume::from_raw(
            self.shape,
            self.data
                .iter()
                .map(|&l| if l == label { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn mask(&self, label: u32) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Displacement,
    Velocity,
    Deformation,
}

/// Three-component field over the grid, component-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    shape: GridShape,
    kind: FieldKind,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(shape: GridShape, kind: FieldKind, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "field data has {} values, grid needs {}",
                data.len(),
                3 * shape.len()
            )));
        }
        check_finite(&data, "vector field")?;
        Ok(Self { shape, kind, data })
    }

    pub fn zeros(shape: GridShape, kind: FieldKind) -> Self {
        Self {
            shape,
            kind,
            data: vec![0.0; 3 * shape.len()],
        }
    }

    pub fn constant(shape: GridShape, kind: FieldKind, value: [f64; 3]) -> Self {
        let n = shape.len();
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            data[c * n..(c + 1) * n].fill(value[c]);
        }
        Self { shape, kind, data }
    }

    pub fn from_fn(
        shape: GridShape,
        kind: FieldKind,
        f: impl Fn(usize, usize, usize) -> [f64; 3],
    ) -> Self {
        let n = shape.len();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let [x, y, z] = shape.coords(i);
            let v = f(x, y, z);
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        Self { shape, kind, data }
    }

    pub(crate) fn from_raw(shape: GridShape, kind: FieldKind, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * shape.len());
        Self { shape, kind, data }
    }

    #[inline]
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    #[inline]
    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.shape.len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            shape: self.shape,
            kind: self.kind,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Per-voxel Euclidean norm.
    pub fn magnitude(&self) -> Vec<f64> {
        (0..self.shape.len())
            .map(|i| {
                let [a, b, c] = self.at(i);
                (a * a + b * b + c * c).sqrt()
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Deterministic parallel sum of `f(0..n)` with compensated (Neumaier)
/// accumulation. Chunk boundaries are fixed, so the result does not depend on
/// the number of worker threads.
pub(crate) fn par_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    const CHUNK: usize = 4096;
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = Neumaier::default();
            for i in c * CHUNK..end {
                acc.add(f(i));
            }
            (acc.sum, acc.comp)
        })
        .collect();
    let mut acc = Neumaier::default();
    for (s, c) in partial {
        acc.add(s);
        acc.add(c);
    }
    acc.value()
}

#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Linear interpolation stencil along one axis: lower node, fraction, and
/// whether the coordinate was inside `[0, n - 1]` (outside, the clamped value
/// is locally constant and the slope is zero).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Axis {
    pub i0: usize,
    pub t: f64,
    pub inside: bool,
}

impl Axis {
    #[inline]
    pub fn new(c: f64, n: usize) -> Self {
        let hi = (n - 1) as f64;
        let inside = (0.0..=hi).contains(&c);
        let c = c.clamp(0.0, hi);
        let i0 = (c.floor() as usize).min(n - 2);
        Self {
            i0,
            t: c - i0 as f64,
            inside,
        }
    }
}

/// Trilinear stencil over the eight surrounding nodes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    ax: [Axis; 3],
    base: usize,
    strides: [usize; 3],
}

impl Stencil {
    #[inline]
    pub fn new(shape: &GridShape, p: [f64; 3]) -> Self {
        let dims = shape.dims_xyz();
        let ax = [
            Axis::new(p[0], dims[0]),
            Axis::new(p[1], dims[1]),
            Axis::new(p[2], dims[2]),
        ];
        let base = shape.index(ax[0].i0, ax[1].i0, ax[2].i0);
        Self {
            ax,
            base,
            strides: [1, shape.stride(1), shape.stride(2)],
        }
    }

    /// The 8 (index, weight) pairs, corner bit `k` selects the upper node on
    /// axis `k`.
    #[inline]
    pub fn corners(&self) -> [(usize, f64); 8] {
        let mut out = [(0usize, 0.0f64); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut idx = self.base;
            let mut w = 1.0;
            for a in 0..3 {
                if k >> a & 1 == 1 {
                    idx += self.strides[a];
                    w *= self.ax[a].t;
                } else {
                    w *= 1.0 - self.ax[a].t;
                }
            }
            *slot = (idx, w);
        }
        out
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        let [sx, sy, sz] = self.strides;
        let b = self.base;
        let (tx, ty, tz) = (self.ax[0].t, self.ax[1].t, self.ax[2].t);
        let c00 = data[b] * (1.0 - tx) + data[b + sx] * tx;
        let c10 = data[b + sy] * (1.0 - tx) + data[b + sy + sx] * tx;
        let c01 = data[b + sz] * (1.0 - tx) + data[b + sz + sx] * tx;
        let c11 = data[b + sz + sy] * (1.0 - tx) + data[b + sz + sy + sx] * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        c0 * (1.0 - tz) + c1 * tz
    }

    /// Value and spatial derivative of the interpolant.
    #[inline]
    pub fn sample_with_grad(&self, data: &[f64]) -> (f64, [f64; 3]) {
        let [sx, sy, sz] = self.strides;
        let b = self.base;
        let (tx, ty, tz) = (self.ax[0].t, self.ax[1].t, self.ax[2].t);
        let v000 = data[b];
        let v100 = data[b + sx];
        let v010 = data[b + sy];
        let v110 = data[b + sy + sx];
        let v001 = data[b + sz];
        let v101 = data[b + sz + sx];
        let v011 = data[b + sz + sy];
        let v111 = data[b + sz + sy + sx];

        let c00 = v000 + (v100 - v000) * tx;
        let c10 = v010 + (v110 - v010) * tx;
        let c01 = v001 + (v101 - v001) * tx;
        let c11 = v011 + (v111 - v011) * tx;
        let c0 = c00 + (c10 - c00) * ty;
        let c1 = c01 + (c11 - c01) * ty;
        let value = c0 + (c1 - c0) * tz;

        let mut g = [0.0; 3];
        if self.ax[0].inside {
            let d0 = (v100 - v000) * (1.0 - ty) + (v110 - v010) * ty;
            let d1 = (v101 - v001) * (1.0 - ty) + (v111 - v011) * ty;
            g[0] = d0 * (1.0 - tz) + d1 * tz;
        }
        if self.ax[1].inside {
            g[1] = (c10 - c00) * (1.0 - tz) + (c11 - c01) * tz;
        }
        if self.ax[2].inside {
            g[2] = c1 - c0;
        }
        (value, g)
    }

    /// Adds `value * weight` into each of the 8 nodes (adjoint of `sample`).
    #[inline]
    pub fn scatter(&self, target: &mut [f64], value: f64) {
        for (idx, w) in self.corners() {
            target[idx] += value * w;
        }
    }
}

fn check_coord(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sample coordinate {p:?}")))
    }
}

/// Trilinear interpolation at a real coordinate, border-clamped.
pub fn sample_trilinear(vol: &Volume, x: f64, y: f64, z: f64) -> Result<f64> {
    check_coord([x, y, z])?;
    Ok(Stencil::new(vol.shape(), [x, y, z]).sample(vol.data()))
}

fn check_displacement(disp: &VectorField) -> Result<()> {
    if disp.kind() == FieldKind::Displacement {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "expected a displacement field, got {:?}",
            disp.kind()
        )))
    }
}

#[inline]
fn target_of(shape: &GridShape, disp: &VectorField, i: usize) -> [f64; 3] {
    let [x, y, z] = shape.coords(i);
    let u = disp.at(i);
    [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
}

/// `out(p) = vol(p + u(p))`.
pub fn warp(vol: &Volume, disp: &VectorField) -> Result<Volume> {
    check_same(vol.shape(), disp.shape(), "warp")?;
    check_displacement(disp)?;
    let shape = *vol.shape();
    let mut out = vec![0.0; shape.len()];
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        *o = Stencil::new(&shape, target_of(&shape, disp, i)).sample(vol.data());
    });
    Ok(Volume::from_raw(shape, out))
}

/// Gradient of `sum_p upstream(p) * warp(vol, u)(p)` with respect to `u`.
pub fn warp_gradient(vol: &Volume, disp: &VectorField, upstream: &Volume) -> Result<VectorField> {
    check_same(vol.shape(), disp.shape(), "warp_gradient")?;
    check_same(vol.shape(), upstream.shape(), "warp_gradient upstream")?;
    check_displacement(disp)?;
    let shape = *vol.shape();
    let n = shape.len();
    let grads: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = upstream.data()[i];
            if g == 0.0 {
                return [0.0; 3];
            }
            let (_, d) = Stencil::new(&shape, target_of(&shape, disp, i)).sample_with_grad(vol.data());
            [g * d[0], g * d[1], g * d[2]]
        })
        .collect();
    Ok(planar_from_vec3(shape, FieldKind::Displacement, &grads))
}

/// Adjoint of `warp` with respect to the image: scatters `upstream` back onto
/// the moving grid.
pub fn warp_adjoint(disp: &VectorField, upstream: &Volume) -> Result<Volume> {
    check_same(disp.shape(), upstream.shape(), "warp_adjoint")?;
    let shape = *disp.shape();
    let mut out = vec![0.0; shape.len()];
    for i in 0..shape.len() {
        let g = upstream.data()[i];
        if g != 0.0 {
            Stencil::new(&shape, target_of(&shape, disp, i)).scatter(&mut out, g);
        }
    }
    Ok(Volume::from_raw(shape, out))
}

/// Nearest-neighbour label warp, `out(p) = labels(round(p + u(p)))`.
pub fn warp_labels(labels: &LabelMap, disp: &VectorField) -> Result<LabelMap> {
    check_same(labels.shape(), disp.shape(), "warp_labels")?;
    check_displacement(disp)?;
    let shape = *labels.shape();
    let dims = shape.dims_xyz();
    let data = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let p = target_of(&shape, disp, i);
            let r = |a: usize| p[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize;
            labels.data()[shape.index(r(0), r(1), r(2))]
        })
        .collect();
    Ok(LabelMap { shape, data })
}

fn planar_from_vec3(shape: GridShape, kind: FieldKind, v: &[[f64; 3]]) -> VectorField {
    let n = shape.len();
    let mut data = vec![0.0; 3 * n];
    for (i, g) in v.iter().enumerate() {
        data[i] = g[0];
        data[n + i] = g[1];
        data[2 * n + i] = g[2];
    }
    VectorField::from_raw(shape, kind, data)
}

/// `(id + a) ∘ (id + b) - id`, i.e. `out(p) = a(p + b(p)) + b(p)`.
pub fn compose(a: &VectorField, b: &VectorField) -> Result<VectorField> {
    check_same(a.shape(), b.shape(), "compose")?;
    check_displacement(a)?;
    check_displacement(b)?;
    Ok(compose_unchecked(a, b))
}

pub(crate) fn compose_unchecked(a: &VectorField, b: &VectorField) -> VectorField {
    let shape = *a.shape();
    let v: Vec<[f64; 3]> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let st = Stencil::new(&shape, target_of(&shape, b, i));
            let ub = b.at(i);
            [
                st.sample(a.component(0)) + ub[0],
                st.sample(a.component(1)) + ub[1],
                st.sample(a.component(2)) + ub[2],
            ]
        })
        .collect();
    planar_from_vec3(shape, FieldKind::Displacement, &v)
}

/// Reverse pass of [`compose`]: given the upstream gradient on the output,
/// returns the gradients with respect to `a` and `b`.
pub fn compose_backward(
    a: &VectorField,
    b: &VectorField,
    upstream: &VectorField,
) -> Result<(VectorField, VectorField)> {
    check_same(a.shape(), b.shape(), "compose_backward")?;
    check_same(a.shape(), upstream.shape(), "compose_backward upstream")?;
    let shape = *a.shape();
    let n = shape.len();

    let gb: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = upstream.at(i);
            let st = Stencil::new(&shape, target_of(&shape, b, i));
            let mut out = g;
            for (c, gc) in g.iter().enumerate() {
                if *gc != 0.0 {
                    let (_, d) = st.sample_with_grad(a.component(c));
                    for k in 0..3 {
                        out[k] += gc * d[k];
                    }
                }
            }
            out
        })
        .collect();

    let mut ga = vec![0.0; 3 * n];
    for i in 0..n {
        let g = upstream.at(i);
        let st = Stencil::new(&shape, target_of(&shape, b, i));
        for (idx, w) in st.corners() {
            for c in 0..3 {
                ga[c * n + idx] += g[c] * w;
            }
        }
    }
    Ok((
        VectorField::from_raw(shape, FieldKind::Displacement, ga),
        planar_from_vec3(shape, FieldKind::Displacement, &gb),
    ))
}

/// Per-axis align-corners resampling weights: target node `t` reads source
/// coordinate `t * (src - 1) / (tgt - 1)`.
fn axis_resample(src: usize, tgt: usize) -> Vec<(usize, f64)> {
    (0..tgt)
        .map(|t| {
            if src == 1 || tgt == 1 {
                return (0, 0.0);
            }
            let c = t as f64 * (src - 1) as f64 / (tgt - 1) as f64;
            let i0 = (c.floor() as usize).min(src - 2);
            (i0, c - i0 as f64)
        })
        .collect()
}

/// Separable align-corners trilinear resampling of one x-fastest channel.
/// Source extents may be 1 on an axis (the value is then replicated).
pub(crate) fn resample_raw(src: &[f64], src_dims: [usize; 3], tgt_dims: [usize; 3]) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut dims = src_dims;
    for a in 0..3 {
        let weights = axis_resample(dims[a], tgt_dims[a]);
        let mut next_dims = dims;
        next_dims[a] = tgt_dims[a];
        let stride_src = [1, dims[0], dims[0] * dims[1]][a];
        let stride_tgt = [1, next_dims[0], next_dims[0] * next_dims[1]][a];
        let total = next_dims[0] * next_dims[1] * next_dims[2];
        let mut next = vec![0.0; total];
        let outer = dims[0] * dims[1] * dims[2] / dims[a];
        // Iterate over all lines parallel to axis `a`.
        for line in 0..outer {
            let (src_base, tgt_base) = line_bases(line, a, dims, next_dims);
            for (t, &(i0, f)) in weights.iter().enumerate() {
                let v0 = cur[src_base + i0 * stride_src];
                let v = if dims[a] == 1 {
                    v0
                } else {
                    v0 * (1.0 - f) + cur[src_base + (i0 + 1) * stride_src] * f
                };
                next[tgt_base + t * stride_tgt] = v;
            }
        }
        cur = next;
        dims = next_dims;
    }
    cur
}

/// Adjoint of [`resample_raw`].
pub(crate) fn resample_raw_adjoint(
    grad_tgt: &[f64],
    src_dims: [usize; 3],
    tgt_dims: [usize; 3],
) -> Vec<f64> {
    // The forward pass resamples x, then y, then z; undo in reverse order.
    let mut dims_seq = vec![src_dims];
    for a in 0..3 {
        let mut d = *dims_seq.last().unwrap();
        d[a] = tgt_dims[a];
        dims_seq.push(d);
    }
    let mut cur = grad_tgt.to_vec();
    for a in (0..3).rev() {
        let dims = dims_seq[a];
        let next_dims = dims_seq[a + 1];
        let weights = axis_resample(dims[a], next_dims[a]);
        let stride_src = [1, dims[0], dims[0] * dims[1]][a];
        let stride_tgt = [1, next_dims[0], next_dims[0] * next_dims[1]][a];
        let mut prev = vec![0.0; dims[0] * dims[1] * dims[2]];
        let outer = dims[0] * dims[1] * dims[2] / dims[a];
        for line in 0..outer {
            let (src_base, tgt_base) = line_bases(line, a, dims, next_dims);
            for (t, &(i0, f)) in weights.iter().enumerate() {
                let g = cur[tgt_base + t * stride_tgt];
                if dims[a] == 1 {
                    prev[src_base] += g;
                } else {
                    prev[src_base + i0 * stride_src] += g * (1.0 - f);
                    prev[src_base + (i0 + 1) * stride_src] += g * f;
                }
            }
        }
        cur = prev;
    }
    cur
}

/// Base offsets of the `line`-th 1D line along axis `a` in source and target.
fn line_bases(line: usize, a: usize, src: [usize; 3], tgt: [usize; 3]) -> (usize, usize) {
    // Enumerate the two remaining axes in increasing order.
    let others: Vec<usize> = (0..3).filter(|&k| k != a).collect();
    let (o0, o1) = (others[0], others[1]);
    let i0 = line % src[o0];
    let i1 = line / src[o0];
    let stride = |dims: [usize; 3], k: usize| [1, dims[0], dims[0] * dims[1]][k];
    (
        i0 * stride(src, o0) + i1 * stride(src, o1),
        i0 * stride(tgt, o0) + i1 * stride(tgt, o1),
    )
}

/// Align-corners trilinear upsampling onto a finer grid.
pub trait Upsample: Sized {
    fn upsample_trilinear(&self, target: GridShape) -> Result<Self>;
}

fn check_upsample(src: &GridShape, tgt: &GridShape) -> Result<()> {
    if tgt.h < src.h || tgt.w < src.w || tgt.d < src.d {
        return Err(Error::InvalidArgument(format!(
            "upsample target {}x{}x{} is smaller than source {}x{}x{}",
            tgt.h, tgt.w, tgt.d, src.h, src.w, src.d
        )));
    }
    Ok(())
}

impl Upsample for Volume {
    fn upsample_trilinear(&self, target: GridShape) -> Result<Self> {
        check_upsample(self.shape(), &target)?;
        let data = resample_raw(self.data(), self.shape.dims_xyz(), target.dims_xyz());
        Ok(Volume::from_raw(target, data))
    }
}

impl Upsample for VectorField {
    /// Displacement-like components are rescaled by the per-axis resolution
    /// ratio, since they are measured in voxels of the respective grid.
    fn upsample_trilinear(&self, target: GridShape) -> Result<Self> {
        check_upsample(self.shape(), &target)?;
        let src = self.shape.dims_xyz();
        let tgt = target.dims_xyz();
        let mut data = Vec::with_capacity(3 * target.len());
        for c in 0..3 {
            let ratio = (tgt[c] - 1) as f64 / (src[c] - 1) as f64;
            let comp = resample_raw(self.component(c), src, tgt);
            data.extend(comp.into_iter().map(|v| v * ratio));
        }
        Ok(VectorField::from_raw(target, self.kind, data))
    }
}

pub fn upsample_trilinear<T: Upsample>(x: &T, target: GridShape) -> Result<T> {
    x.upsample_trilinear(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: GridShape) -> Volume {
        Volume::from_fn(shape, |x, _, _| x as f64)
    }

    #[test]
    fn shape_rejects_thin_axes() {
        assert!(GridShape::new(1, 4, 4).is_err());
        assert!(GridShape::with_spacing(4, 4, 4, [1.0, 0.0, 1.0]).is_err());
        let s = GridShape::new(3, 4, 5).unwrap();
        assert_eq!(s.index(1, 2, 3), 1 + 4 * (2 + 3 * 3));
        assert_eq!(s.coords(s.index(3, 2, 4)), [3, 2, 4]);
    }

    #[test]
    fn trilinear_examples() {
        let s = GridShape::new(4, 5, 6).unwrap();
        let data: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let v = Volume::new(s, data).unwrap();
        assert_eq!(sample_trilinear(&v, 2.0, 3.0, 4.0).unwrap(), v.get(2, 3, 4));
        let r = ramp(s);
        assert_eq!(sample_trilinear(&r, 1.5, 0.0, 0.0).unwrap(), 1.5);
        assert_eq!(sample_trilinear(&v, -5.0, 0.0, 0.0).unwrap(), v.get(0, 0, 0));
        assert!(sample_trilinear(&v, f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn trilinear_reproduces_affine() {
        let s = GridShape::cube(6).unwrap();
        let f = |x: f64, y: f64, z: f64| 0.3 + 1.5 * x - 0.25 * y + 2.0 * z;
        let v = Volume::from_fn(s, |x, y, z| f(x as f64, y as f64, z as f64));
        for &(x, y, z) in &[(0.2, 3.7, 4.1), (4.99, 0.01, 2.5), (1.0, 1.5, 2.25)] {
            let got = sample_trilinear(&v, x, y, z).unwrap();
            assert!((got - f(x, y, z)).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_examples() {
        let s = GridShape::cube(5).unwrap();
        let data: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let v = Volume::new(s, data).unwrap();
        let zero = VectorField::zeros(s, FieldKind::Displacement);
        assert_eq!(warp(&v, &zero).unwrap(), v);

        let shift = VectorField::constant(s, FieldKind::Displacement, [1.0, 0.0, 0.0]);
        let out = warp(&v, &shift).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let expect = v.get((x + 1).min(4), y, z);
                    assert_eq!(out.get(x, y, z), expect);
                }
            }
        }

        let half = VectorField::constant(s, FieldKind::Displacement, [0.5, 0.0, 0.0]);
        let out = warp(&ramp(s), &half).unwrap();
        for x in 0..4 {
            assert_eq!(out.get(x, 2, 2), x as f64 + 0.5);
        }
        let vel = VectorField::zeros(s, FieldKind::Velocity);
        assert!(warp(&v, &vel).is_err());
        let other = VectorField::zeros(GridShape::cube(4).unwrap(), FieldKind::Displacement);
        assert!(matches!(warp(&v, &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn warp_gradient_examples() {
        let s = GridShape::cube(5).unwrap();
        let c = Volume::filled(s, 3.0);
        let u = VectorField::constant(s, FieldKind::Displacement, [0.3, -0.2, 0.1]);
        let up = Volume::filled(s, 1.0);
        assert!(warp_gradient(&c, &u, &up).unwrap().data().iter().all(|&g| g == 0.0));

        let mut up = Volume::zeros(s);
        let p = s.index(2, 2, 2);
        up.data_mut()[p] = 1.0;
        let g = warp_gradient(&ramp(s), &u, &up).unwrap();
        assert_eq!(g.at(p), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_identity_and_translations() {
        let s = GridShape::cube(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3 * s.len()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let u = VectorField::new(s, FieldKind::Displacement, data).unwrap();
        let zero = VectorField::zeros(s, FieldKind::Displacement);
        assert_eq!(compose(&u, &zero).unwrap(), u);
        assert_eq!(compose(&zero, &u).unwrap(), u);

        let a = VectorField::constant(s, FieldKind::Displacement, [0.5, 0.25, 0.0]);
        let b = VectorField::constant(s, FieldKind::Displacement, [1.0, -0.5, 0.75]);
        let c = compose(&a, &b).unwrap();
        // Constant `a` is unaffected by clamping, so the sum holds everywhere.
        for i in 0..s.len() {
            assert_eq!(c.at(i), [1.5, -0.25, 0.75]);
        }
    }

    #[test]
    fn upsample_examples() {
        let s = GridShape::cube(4).unwrap();
        let v = Volume::from_fn(s, |x, y, z| (x * 7 + y * 3 + z) as f64);
        assert_eq!(v.upsample_trilinear(s).unwrap(), v);

        let small = GridShape::cube(2).unwrap();
        let f = |x: f64, y: f64, z: f64| 1.0 + 2.0 * x - 3.0 * y + 0.5 * z;
        let v = Volume::from_fn(small, |x, y, z| f(x as f64, y as f64, z as f64));
        let big = GridShape::cube(5).unwrap();
        let up = v.upsample_trilinear(big).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let e = f(x as f64 / 4.0, y as f64 / 4.0, z as f64 / 4.0);
                    assert!((up.get(x, y, z) - e).abs() < 1e-12);
                }
            }
        }
        assert!(up.upsample_trilinear(small).is_err());
    }

    #[test]
    fn upsample_rescales_displacements() {
        let small = GridShape::cube(3).unwrap();
        let big = GridShape::new(5, 9, 3).unwrap();
        let u = VectorField::constant(small, FieldKind::Displacement, [1.0, 1.0, 1.0]);
        let up = u.upsample_trilinear(big).unwrap();
        // x spans w: 3 -> 9 (ratio 4), y spans h: 3 -> 5 (ratio 2), z unchanged.
        assert_eq!(up.at(17), [4.0, 2.0, 1.0]);
    }

    #[test]
    fn resample_adjoint_identity() {
        let src = [3, 2, 4];
        let tgt = [7, 5, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..140).map(|_| rng.random::<f64>()).collect();
        let ax = resample_raw(&x, src, tgt);
        let aty = resample_raw_adjoint(&y, src, tgt);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn label_warp_is_nearest() {
        let s = GridShape::cube(4).unwrap();
        let l = LabelMap::from_fn(s, |x, _, _| x as u32);
        let u = VectorField::constant(s, FieldKind::Displacement, [0.6, 0.0, 0.0]);
        let out = warp_labels(&l, &u).unwrap();
        assert_eq!(out.get(0, 1, 1), 1);
        assert_eq!(out.get(3, 1, 1), 3);
        assert_eq!(l.labels(), vec![1, 2, 3]);
    }
}
