//! Synthetic phantoms and ground-truth deformations.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffeo::{exp_ss, DEFAULT_SS_STEPS};
use crate::error::{Error, Result};
use crate::grid::{warp, warp_labels, FieldKind, GridShape, LabelMap, VectorField, Volume};

/// Axis-aligned ellipsoid painted with one label and intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub label: u32,
    /// Center in voxel coordinates `(x, y, z)`.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl Structure {
    pub fn sphere(label: u32, center: [f64; 3], radius: f64, intensity: f64) -> Self {
        Self {
            label,
            center,
            radii: [radius; 3],
            intensity,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.radial(p) <= 1.0
    }

    /// `Σ ((p - c) / r)²`; 1 on the surface.
    fn radial(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// Structures are painted in order, so later ones overwrite earlier ones
/// (a cavity is a structure inside another).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub structures: Vec<Structure>,
    pub background: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelMap,
    pub descriptor: PhantomSpec,
}

fn check_intensity(v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("intensity {v} is outside [0, 1]")));
    }
    Ok(())
}

/// Rasterizes `spec`, adds `N(0, σ²)` noise to the image and clamps it to
/// `[0, 1]`. Labels are noise-free.
pub fn make_phantom(shape: GridShape, spec: &PhantomSpec, noise_sigma: f64, seed: u64) -> Result<Phantom> {
    check_intensity(spec.background)?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let dims = shape.dims_xyz();
    for s in &spec.structures {
        check_intensity(s.intensity)?;
        for a in 0..3 {
            let (lo, hi) = (s.center[a] - s.radii[a], s.center[a] + s.radii[a]);
            if !(s.radii[a] > 0.0 && lo >= 0.0 && hi <= (dims[a] - 1) as f64) {
                return Err(Error::InvalidArgument(format!(
                    "structure {} does not fit inside the {}x{}x{} grid",
                    s.label, dims[0], dims[1], dims[2]
                )));
            }
        }
    }
    let owner = |x: usize, y: usize, z: usize| {
        let p = [x as f64, y as f64, z as f64];
        spec.structures.iter().rev().find(|s| s.contains(p))
    };
    let labels = LabelMap::from_fn(shape, |x, y, z| owner(x, y, z).map_or(0, |s| s.label));
    let mut image = Volume::from_fn(shape, |x, y, z| owner(x, y, z).map_or(spec.background, |s| s.intensity));
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in image.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Phantom {
        image,
        labels,
        descriptor: spec.clone(),
    })
}

/// How the fixed image is generated from the moving one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DeformSpec {
    /// Gaussian-smoothed white noise (std `sigma` voxels) scaled to
    /// `max_magnitude` voxels, exponentiated by scaling and squaring.
    RandomSvf { sigma: f64, max_magnitude: f64 },
    /// Per-axis dilation of one structure by `factors`, fading out smoothly
    /// away from it.
    Dilation { label: u32, factors: [f64; 3] },
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub moving: Phantom,
    pub fixed: Phantom,
    /// Ground truth: `fixed(p) = moving(p + true_u(p))`.
    pub true_u: VectorField,
}

impl SyntheticPair {
    /// Mean `‖u - true_u‖` over the voxels where `mask` holds.
    pub fn endpoint_error(&self, u: &VectorField, mask: &[bool]) -> Option<f64> {
        let (sum, n) = (0..u.shape().len())
            .filter(|&i| mask[i])
            .fold((0.0, 0usize), |(s, n), i| {
                let (a, b) = (u.at(i), self.true_u.at(i));
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                (s + d, n + 1)
            });
        (n > 0).then(|| sum / n as f64)
    }
}

/// Separable Gaussian smoothing with clamped borders, truncated at 3σ.
fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let n = dims[a] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / strides[a]) as isize % n;
            let base = i as isize - c * strides[a] as isize;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let j = (c + k as isize - r).clamp(0, n - 1);
                    w * cur[(base + j * strides[a] as isize) as usize]
                })
                .sum();
        }
        cur = next;
    }
    cur
}

fn random_velocity(shape: GridShape, sigma: f64, max_magnitude: f64, seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dims = shape.dims_xyz();
    let mut data = Vec::with_capacity(3 * shape.len());
    for _ in 0..3 {
        let noise: Vec<f64> = (0..shape.len()).map(|_| normal.sample(&mut rng)).collect();
        data.extend(gaussian_smooth(&noise, dims, sigma));
    }
    let peak = (0..shape.len())
        .map(|i| (data[i].powi(2) + data[i + shape.len()].powi(2) + data[i + 2 * shape.len()].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { max_magnitude / peak } else { 0.0 };
    data.iter_mut().for_each(|v| *v *= scale);
    VectorField::from_raw(shape, FieldKind::Velocity, data)
}

/// Smooth step from 1 (`t ≤ 0`) to 0 (`t ≥ 1`).
fn taper(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn dilation_velocity(shape: GridShape, s: &Structure, factors: [f64; 3]) -> VectorField {
    let rates = factors.map(|f| -f.ln());
    // Full strength out to 1.2x the dilated extent, fading to zero at 2x.
    let reach: [f64; 3] = std::array::from_fn(|a| s.radii[a] * factors[a].max(1.0));
    VectorField::from_fn(shape, FieldKind::Velocity, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let rho = (0..3)
            .map(|a| ((p[a] - s.center[a]) / reach[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let w = taper((rho - 1.2) / 0.8);
        std::array::from_fn(|a| rates[a] * (p[a] - s.center[a]) * w)
    })
}

/// Deforms `base` into a fixed image; `base` becomes the moving image.
pub fn make_pair(base: &Phantom, deform: &DeformSpec, seed: u64) -> Result<SyntheticPair> {
    let shape = *base.image.shape();
    let v = match deform {
        DeformSpec::RandomSvf { sigma, max_magnitude } => {
            if !(*sigma >= 0.0 && *max_magnitude >= 0.0) {
                return Err(Error::InvalidArgument("random SVF needs sigma, magnitude >= 0".into()));
            }
            random_velocity(shape, *sigma, *max_magnitude, seed)
        }
        DeformSpec::Dilation { label, factors } => {
            if factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
                return Err(Error::InvalidArgument(format!("dilation factors must be > 0: {factors:?}")));
            }
            let s = base
                .descriptor
                .structures
                .iter()
                .find(|s| s.label == *label)
                .ok_or_else(|| Error::InvalidArgument(format!("no structure with label {label}")))?;
            dilation_velocity(shape, s, *factors)
        }
    };
    let true_u = exp_ss(&v, DEFAULT_SS_STEPS)?;
    let fixed = Phantom {
        image: warp(&base.image, &true_u)?,
        labels: warp_labels(&base.labels, &true_u)?,
        descriptor: base.descriptor.clone(),
    };
    Ok(SyntheticPair {
        moving: base.clone(),
        fixed,
        true_u,
    })
}

/// Ready-made phantom pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two blobs of different intensity under a smooth random deformation.
    TwoStructure,
    /// A tissue ellipsoid whose dark inner cavity dilates strongly while the
    /// rest barely moves.
    Ventricle,
    /// A single sphere stretched into an ellipsoid.
    SphereEllipsoid,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-structure" => Ok(Preset::TwoStructure),
            "ventricle" => Ok(Preset::Ventricle),
            "sphere-ellipsoid" => Ok(Preset::SphereEllipsoid),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}

pub const PRESET_NOISE: f64 = 0.02;

impl Preset {
    pub fn spec(self, size: usize) -> PhantomSpec {
        let n = size as f64;
        let c = (n - 1.0) / 2.0;
        match self {
            Preset::TwoStructure => PhantomSpec {
                structures: vec![
                    Structure::sphere(1, [0.32 * n, c, c], 0.17 * n, 0.9),
                    Structure {
                        label: 2,
                        center: [0.68 * n, c, c],
                        radii: [0.14 * n, 0.22 * n, 0.18 * n],
                        intensity: 0.5,
                    },
                ],
                background: 0.1,
            },
            Preset::Ventricle => PhantomSpec {
                structures: vec![
                    Structure {
                        label: 1,
                        center: [c, c, c],
                        radii: [0.4 * n, 0.36 * n, 0.36 * n],
                        intensity: 0.7,
                    },
                    Structure::sphere(2, [c, c, c], 0.12 * n, 0.15),
                ],
                background: 0.0,
            },
            Preset::SphereEllipsoid => PhantomSpec {
                structures: vec![Structure::sphere(1, [c, c, c], 0.19 * n, 0.8)],
                background: 0.1,
            },
        }
    }

    pub fn deformation(self, size: usize) -> DeformSpec {
        match self {
            Preset::TwoStructure => DeformSpec::RandomSvf {
                sigma: size as f64 / 8.0,
                max_magnitude: size as f64 / 16.0,
            },
            Preset::Ventricle => DeformSpec::Dilation {
                label: 2,
                factors: [1.6; 3],
            },
            Preset::SphereEllipsoid => DeformSpec::Dilation {
                label: 1,
                factors: [1.5, 1.25, 1.0],
            },
        }
    }

    /// Phantom pair on a `size³` grid.
    pub fn generate(self, size: usize, seed: u64) -> Result<SyntheticPair> {
        let shape = GridShape::cube(size)?;
        let base = make_phantom(shape, &self.spec(size), PRESET_NOISE, seed)?;
        make_pair(&base, &self.deformation(size), seed.wrapping_add(1))
    }
}
