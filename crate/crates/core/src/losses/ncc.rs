//! Local (windowed) squared normalized cross-correlation.
//!
//! Windows are cubes of odd side length centred on each voxel and truncated
//! at the grid border; the sample count of a truncated window is its actual
//! voxel count. Window membership is symmetric, which lets the gradient be
//! written with the same box sums as the forward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{check_same, par_sum, Volume};

/// Denominator stabilizer of the squared correlation.
pub const NCC_DELTA: f64 = 1e-5;

/// Box sum over a cube of radius `r` (truncated at the border), separable.
pub(crate) fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for a in 0..3 {
        let n = dims[a];
        let stride = [1, dims[0], dims[0] * dims[1]][a];
        let mut next = vec![0.0; cur.len()];
        let lines = cur.len() / n;
        let others: Vec<usize> = (0..3).filter(|&k| k != a).collect();
        let strides = [1, dims[0], dims[0] * dims[1]];
        let mut prefix = vec![0.0; n + 1];
        for line in 0..lines {
            let i0 = line % dims[others[0]];
            let i1 = line / dims[others[0]];
            let base = i0 * strides[others[0]] + i1 * strides[others[1]];
            for k in 0..n {
                prefix[k + 1] = prefix[k] + cur[base + k * stride];
            }
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r + 1).min(n);
                next[base + k * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn window_count(dims: [usize; 3], r: usize, p: [usize; 3]) -> f64 {
    (0..3)
        .map(|a| {
            let lo = p[a].saturating_sub(r);
            let hi = (p[a] + r + 1).min(dims[a]);
            (hi - lo) as f64
        })
        .product()
}

/// Windowed statistics at one voxel.
#[derive(Clone, Copy, Debug)]
struct Stats {
    cross: f64,
    var_a: f64,
    var_b: f64,
    mean_a: f64,
    mean_b: f64,
}

impl Stats {
    fn cc(&self) -> f64 {
        self.cross * self.cross / (self.var_a * self.var_b + NCC_DELTA)
    }
}

/// `1 - mean_p NCC²(p)` and its gradient with respect to `a`.
pub fn local_ncc(a: &Volume, b: &Volume, window: usize) -> Result<(f64, Volume)> {
    check_same(a.shape(), b.shape(), "local_ncc")?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "NCC window must be a positive odd integer, got {window}"
        )));
    }
    let shape = *a.shape();
    let dims = shape.dims_xyz();
    let r = window / 2;
    let n = shape.len();
    let (ad, bd) = (a.data(), b.data());

    let sa = box_sum(ad, dims, r);
    let sb = box_sum(bd, dims, r);
    let saa = box_sum(&ad.iter().map(|v| v * v).collect::<Vec<_>>(), dims, r);
    let sbb = box_sum(&bd.iter().map(|v| v * v).collect::<Vec<_>>(), dims, r);
    let sab = box_sum(
        &ad.iter().zip(bd).map(|(x, y)| x * y).collect::<Vec<_>>(),
        dims,
        r,
    );

    let stats: Vec<Stats> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cnt = window_count(dims, r, shape.coords(i));
            Stats {
                cross: sab[i] - sa[i] * sb[i] / cnt,
                var_a: (saa[i] - sa[i] * sa[i] / cnt).max(0.0),
                var_b: (sbb[i] - sb[i] * sb[i] / cnt).max(0.0),
                mean_a: sa[i] / cnt,
                mean_b: sb[i] / cnt,
            }
        })
        .collect();

    let value = 1.0 - par_sum(n, |i| stats[i].cc()) / n as f64;

    // d cc_p / d a_q = A_p (b_q - mean_b_p) - B_p (a_q - mean_a_p)
    let mut coef_a = vec![0.0; n];
    let mut coef_b = vec![0.0; n];
    let mut offset = vec![0.0; n];
    for i in 0..n {
        let s = &stats[i];
        let den = s.var_a * s.var_b + NCC_DELTA;
        let ca = 2.0 * s.cross / den;
        let cb = 2.0 * s.cross * s.cross * s.var_b / (den * den);
        coef_a[i] = ca;
        coef_b[i] = cb;
        offset[i] = ca * s.mean_b - cb * s.mean_a;
    }
    let box_a = box_sum(&coef_a, dims, r);
    let box_b = box_sum(&coef_b, dims, r);
    let box_off = box_sum(&offset, dims, r);
    let scale = -1.0 / n as f64;
    let grad = (0..n)
        .map(|q| scale * (bd[q] * box_a[q] - ad[q] * box_b[q] - box_off[q]))
        .collect();
    Ok((value, Volume::from_raw(shape, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(shape: GridShape, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Volume::new(shape, data).unwrap()
    }

    /// Direct per-window evaluation, no box sums.
    fn oracle(a: &Volume, b: &Volume, window: usize) -> f64 {
        let s = *a.shape();
        let [nx, ny, nz] = s.dims_xyz();
        let r = (window / 2) as i64;
        let mut total = 0.0;
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let mut va = Vec::new();
                    let mut vb = Vec::new();
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                                    continue;
                                }
                                va.push(a.get(qx as usize, qy as usize, qz as usize));
                                vb.push(b.get(qx as usize, qy as usize, qz as usize));
                            }
                        }
                    }
                    let m = va.len() as f64;
                    let ma = va.iter().sum::<f64>() / m;
                    let mb = vb.iter().sum::<f64>() / m;
                    let cross: f64 = va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum();
                    let vara: f64 = va.iter().map(|p| (p - ma) * (p - ma)).sum();
                    let varb: f64 = vb.iter().map(|q| (q - mb) * (q - mb)).sum();
                    total += cross * cross / (vara * varb + NCC_DELTA);
                }
            }
        }
        1.0 - total / s.len() as f64
    }

    #[test]
    fn box_sum_matches_direct() {
        let s = GridShape::new(4, 5, 3).unwrap();
        let v = noise(s, 2);
        let out = box_sum(v.data(), s.dims_xyz(), 1);
        let [nx, ny, nz] = s.dims_xyz();
        for i in 0..s.len() {
            let [x, y, z] = s.coords(i);
            let mut acc = 0.0;
            for qz in z.saturating_sub(1)..(z + 2).min(nz) {
                for qy in y.saturating_sub(1)..(y + 2).min(ny) {
                    for qx in x.saturating_sub(1)..(x + 2).min(nx) {
                        acc += v.get(qx, qy, qz);
                    }
                }
            }
            assert!((acc - out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_similarity_is_near_zero() {
        let s = GridShape::cube(8).unwrap();
        let a = noise(s, 1);
        let (l, _) = local_ncc(&a, &a, 3).unwrap();
        assert!(l.abs() < 1e-3, "{l}");
    }

    #[test]
    fn affine_invariance() {
        let s = GridShape::cube(8).unwrap();
        let a = noise(s, 3);
        let b = noise(s, 4);
        let b2 = Volume::new(s, b.data().iter().map(|v| 2.0 * v + 3.0).collect()).unwrap();
        let (l1, _) = local_ncc(&a, &b, 5).unwrap();
        let (l2, _) = local_ncc(&a, &b2, 5).unwrap();
        assert!((l1 - l2).abs() < 1e-4, "{l1} {l2}");
        let same = local_ncc(&a, &Volume::new(s, a.data().iter().map(|v| 2.0 * v + 3.0).collect()).unwrap(), 5).unwrap().0;
        assert!(same.abs() < 1e-3);
    }

    #[test]
    fn matches_direct_window_oracle() {
        let s = GridShape::cube(12).unwrap();
        let a = noise(s, 10);
        let b = noise(s, 11);
        let (l, _) = local_ncc(&a, &b, 3).unwrap();
        let o = oracle(&a, &b, 3);
        assert!((l - o).abs() < 1e-6, "{l} vs {o}");
    }

    #[test]
    fn constant_windows_contribute_zero() {
        let s = GridShape::cube(6).unwrap();
        let a = Volume::filled(s, 2.0);
        let b = noise(s, 5);
        let (l, g) = local_ncc(&a, &b, 3).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn rejects_even_window() {
        let s = GridShape::cube(4).unwrap();
        let a = Volume::zeros(s);
        assert!(local_ncc(&a, &a, 4).is_err());
        assert!(local_ncc(&a, &a, 0).is_err());
    }
}
