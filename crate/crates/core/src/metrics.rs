//! Registration quality metrics: label overlap, surface distance and
//! Jacobian-based deformation regularity.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::{jacobian_determinants, DiffScheme};
use crate::error::{Error, Result};
use crate::grid::{check_same, par_sum, GridShape, LabelMap, VectorField};

/// Lower clamp applied to Jacobian determinants before taking the log.
pub const LOG_DET_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    pub label: u32,
    pub score: f64,
    /// The label occurs in neither map; the score is 1 by convention.
    pub absent: bool,
}

/// Per-label Dice `2|A∩B| / (|A| + |B|)`.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<Vec<DiceScore>> {
    check_same(a.shape(), b.shape(), "dice")?;
    Ok(labels
        .iter()
        .map(|&label| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let (ia, ib) = (x == label, y == label);
                na += ia as usize;
                nb += ib as usize;
                both += (ia && ib) as usize;
            }
            if na + nb == 0 {
                DiceScore {
                    label,
                    score: 1.0,
                    absent: true,
                }
            } else {
                DiceScore {
                    label,
                    score: 2.0 * both as f64 / (na + nb) as f64,
                    absent: false,
                }
            }
        })
        .collect())
}

/// Mask voxels with at least one 6-neighbour outside the mask. Neighbours
/// beyond the grid count as outside.
pub fn surface_voxels(shape: &GridShape, mask: &[bool]) -> Vec<usize> {
    let dims = shape.dims_xyz();
    (0..shape.len())
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let p = shape.coords(i);
            (0..3).any(|a| {
                let st = shape.stride(a);
                p[a] == 0 || p[a] + 1 == dims[a] || !mask[i - st] || !mask[i + st]
            })
        })
        .collect()
}

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher). Entries of
/// `f` may be infinite; finite inputs that are integers give exact outputs.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut v = vec![0usize; sites.len()];
    let mut z = vec![0.0f64; sites.len() + 1];
    let mut k = 0usize;
    v[0] = sites[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &sites[1..] {
        let qf = q as f64;
        loop {
            let vk = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + vk * vk)) / (2.0 * qf - 2.0 * vk);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in voxels) to the nearest site.
pub fn squared_distance_transform(shape: &GridShape, sites: &[usize]) -> Vec<f64> {
    let dims = shape.dims_xyz();
    let mut cur = vec![f64::INFINITY; shape.len()];
    for &s in sites {
        cur[s] = 0.0;
    }
    for a in 0..3 {
        let n = dims[a];
        let st = shape.stride(a);
        let others: Vec<usize> = (0..3).filter(|&k| k != a).collect();
        let lines = shape.len() / n;
        let results: Vec<(usize, Vec<f64>)> = (0..lines)
            .into_par_iter()
            .map(|line| {
                let i0 = line % dims[others[0]];
                let i1 = line / dims[others[0]];
                let base = i0 * shape.stride(others[0]) + i1 * shape.stride(others[1]);
                let f: Vec<f64> = (0..n).map(|k| cur[base + k * st]).collect();
                let mut o = vec![0.0; n];
                edt_1d(&f, &mut o);
                (base, o)
            })
            .collect();
        for (base, o) in results {
            for (k, v) in o.into_iter().enumerate() {
                cur[base + k * st] = v;
            }
        }
    }
    cur
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// 95th percentile of the symmetric surface-to-surface nearest distances.
pub fn hd95(shape: &GridShape, a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != shape.len() || b.len() != shape.len() {
        return Err(Error::ShapeMismatch("hd95 mask length".into()));
    }
    let sa = surface_voxels(shape, a);
    let sb = surface_voxels(shape, b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::InvalidArgument("hd95 needs two non-empty masks".into()));
    }
    let da = squared_distance_transform(shape, &sa);
    let db = squared_distance_transform(shape, &sb);
    let mut dists: Vec<f64> = sa
        .iter()
        .map(|&i| db[i].sqrt())
        .chain(sb.iter().map(|&i| da[i].sqrt()))
        .collect();
    Ok(percentile(&mut dists, 95.0))
}

/// Population standard deviation of `log det J` over interior voxels, using
/// central differences.
pub fn sdlogj(u: &VectorField) -> f64 {
    let shape = *u.shape();
    let det = jacobian_determinants(u, DiffScheme::Central);
    let logs: Vec<f64> = (0..shape.len())
        .filter(|&i| !shape.on_border(i))
        .map(|i| det.data()[i].max(LOG_DET_FLOOR).ln())
        .collect();
    if logs.is_empty() {
        return 0.0;
    }
    let n = logs.len() as f64;
    let mean = par_sum(logs.len(), |i| logs[i]) / n;
    (par_sum(logs.len(), |i| (logs[i] - mean).powi(2)) / n).sqrt()
}

/// Percentage of voxels whose (central-difference) Jacobian determinant is
/// not positive.
pub fn pct_nonpos_jacobian(u: &VectorField) -> f64 {
    pct_nonpos_jacobian_with(u, DiffScheme::Central)
}

pub fn pct_nonpos_jacobian_with(u: &VectorField, scheme: DiffScheme) -> f64 {
    let det = jacobian_determinants(u, scheme);
    let count = det.data().iter().filter(|&&d| d <= 0.0).count();
    100.0 * count as f64 / det.data().len() as f64
}

/// Corners of a grid cell are numbered `bx + 2 by + 4 bz`. The split uses
/// the central tetrahedron on corners {1, 2, 4, 7}, so the tetrahedron at
/// corner 0 carries exactly the forward-difference Jacobian.
const TETRAHEDRA: [[usize; 4]; 5] = [[0, 1, 2, 4], [3, 2, 1, 7], [5, 1, 4, 7], [6, 4, 2, 7], [1, 2, 4, 7]];

fn corner_offset(k: usize) -> [usize; 3] {
    [k & 1, k >> 1 & 1, k >> 2 & 1]
}

fn signed_volume(p: [[f64; 3]; 4]) -> f64 {
    let e = |i: usize| [p[i][0] - p[0][0], p[i][1] - p[0][1], p[i][2] - p[0][2]];
    crate::diffeo::det3([e(1), e(2), e(3)]) / 6.0
}

/// Orientation of each tetrahedron in the undeformed cell.
fn reference_signs() -> [f64; 5] {
    let mut s = [0.0; 5];
    for (t, tet) in TETRAHEDRA.iter().enumerate() {
        let pts = tet.map(|k| corner_offset(k).map(|c| c as f64));
        s[t] = signed_volume(pts).signum();
    }
    s
}

/// Non-diffeomorphic volume: the inverted volume of every deformed cell's
/// 5-tetrahedron split, as a percentage of the total deformed volume
/// (inverted tetrahedra counted by magnitude). A fully collapsed grid has
/// no volume and reports 0.
pub fn pct_ndv(u: &VectorField) -> f64 {
    let shape = *u.shape();
    let [nx, ny, nz] = shape.dims_xyz();
    let cells = (nx - 1) * (ny - 1) * (nz - 1);
    let signs = reference_signs();
    let cell_volumes = |c: usize| {
        let x = c % (nx - 1);
        let y = (c / (nx - 1)) % (ny - 1);
        let z = c / ((nx - 1) * (ny - 1));
        let corner = |k: usize| {
            let o = corner_offset(k);
            let (px, py, pz) = (x + o[0], y + o[1], z + o[2]);
            let d = u.at(shape.index(px, py, pz));
            [px as f64 + d[0], py as f64 + d[1], pz as f64 + d[2]]
        };
        let pts: [[f64; 3]; 8] = std::array::from_fn(corner);
        let mut inverted = 0.0;
        let mut total = 0.0;
        for (tet, s) in TETRAHEDRA.iter().zip(signs) {
            let v = s * signed_volume(tet.map(|k| pts[k]));
            inverted += (-v).max(0.0);
            total += v.abs();
        }
        (inverted, total)
    };
    let inverted = par_sum(cells, |c| cell_volumes(c).0);
    let total = par_sum(cells, |c| cell_volumes(c).1);
    if total > 0.0 {
        100.0 * inverted / total
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_label: BTreeMap<String, f64>,
    pub dice_mean: Option<f64>,
    pub hd95_per_label: BTreeMap<String, f64>,
    pub hd95_mean: Option<f64>,
    pub sdlogj: f64,
    pub pct_nonpos_jac: f64,
    pub pct_ndv: f64,
}

impl MetricsReport {
    /// Jacobian metrics of `u`, plus overlap metrics when an aligned label
    /// pair (warped moving, fixed) is given.
    pub fn evaluate(u: &VectorField, labels: Option<(&LabelMap, &LabelMap)>) -> Result<Self> {
        let mut report = MetricsReport {
            sdlogj: sdlogj(u),
            pct_nonpos_jac: pct_nonpos_jacobian(u),
            pct_ndv: pct_ndv(u),
            ..Default::default()
        };
        if let Some((a, b)) = labels {
            report.add_overlap(a, b)?;
        }
        Ok(report)
    }

    pub fn add_overlap(&mut self, a: &LabelMap, b: &LabelMap) -> Result<()> {
        check_same(a.shape(), b.shape(), "metrics labels")?;
        let mut labels = a.labels();
        labels.extend(b.labels());
        labels.sort_unstable();
        labels.dedup();
        let scores = dice(a, b, &labels)?;
        for s in &scores {
            self.dice_per_label.insert(s.label.to_string(), s.score);
        }
        self.dice_mean = mean(scores.iter().map(|s| s.score));
        for &l in &labels {
            let (ma, mb) = (a.mask(l), b.mask(l));
            if ma.iter().any(|&m| m) && mb.iter().any(|&m| m) {
                self.hd95_per_label.insert(l.to_string(), hd95(a.shape(), &ma, &mb)?);
            }
        }
        self.hd95_mean = mean(self.hd95_per_label.values().copied());
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}
