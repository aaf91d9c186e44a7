//! Reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and the backward pass simply walks it in reverse.
//! Gradients accumulate additively into every input of a node.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::grid::{resample_raw, resample_raw_adjoint};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stabilizer inside the square root of every normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv3d { x: Var, w: Var, b: Var },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    AvgPool2(Var),
    Resize(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    /// Per-channel statistics over the spatial extent.
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Per-voxel statistics over the channels.
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Add(Var, Var),
    Dot { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `W x + b` for a vector `x`, `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), inp, "linear input size");
        assert_eq!(bv.len(), out, "linear bias size");
        let y = (0..out)
            .map(|o| {
                let row = &wv.data()[o * inp..(o + 1) * inp];
                bv.data()[o] + row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push(Tensor::from_raw(vec![out], y), Op::Linear { x, w, b })
    }

    /// 3×3×3 convolution, stride 1, zero padding 1. Weights `[co, ci, 3, 3, 3]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (co, ci) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.channels(), ci, "conv input channels");
        assert_eq!(wv.shape()[2..], [3, 3, 3], "conv kernel");
        let dims = xv.spatial_xyz();
        let s = xv.spatial_len();
        let mut out = vec![0.0; co * s];
        out.par_chunks_mut(s).enumerate().for_each(|(o, dst)| {
            dst.fill(bv.data()[o]);
            for c in 0..ci {
                let src = &xv.data()[c * s..(c + 1) * s];
                let kern = &wv.data()[(o * ci + c) * 27..(o * ci + c + 1) * 27];
                for (k, &wk) in kern.iter().enumerate() {
                    shifted_axpy(dst, src, dims, offset(k), wk);
                }
            }
        });
        self.push(
            Tensor::from_raw(Tensor::feature_shape(co, dims), out),
            Op::Conv3d { x, w, b },
        )
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64 + Sync) -> Var {
        let xv = self.value(x);
        let data = xv.data().par_iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// 2×2×2 average pooling of a feature map with even extents.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [nx, ny, nz] = xv.spatial_xyz();
        assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0, "avg_pool2 needs even extents");
        let (mx, my, mz) = (nx / 2, ny / 2, nz / 2);
        let c = xv.channels();
        let s = xv.spatial_len();
        let mut out = vec![0.0; c * mx * my * mz];
        for ch in 0..c {
            let src = &xv.data()[ch * s..(ch + 1) * s];
            for z in 0..mz {
                for y in 0..my {
                    for xx in 0..mx {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            let (a, b, d) = (k & 1, k >> 1 & 1, k >> 2 & 1);
                            acc += src[(2 * xx + a) + nx * ((2 * y + b) + ny * (2 * z + d))];
                        }
                        out[ch * mx * my * mz + xx + mx * (y + my * z)] = acc / 8.0;
                    }
                }
            }
        }
        self.push(
            Tensor::from_raw(Tensor::feature_shape(c, [mx, my, mz]), out),
            Op::AvgPool2(x),
        )
    }

    /// Align-corners trilinear resampling of every channel to `target` (x, y, z).
    pub fn resize(&mut self, x: Var, target: [usize; 3]) -> Var {
        let xv = self.value(x);
        let src = xv.spatial_xyz();
        let s = xv.spatial_len();
        let c = xv.channels();
        let mut out = Vec::with_capacity(c * target.iter().product::<usize>());
        for ch in 0..c {
            out.extend(resample_raw(&xv.data()[ch * s..(ch + 1) * s], src, target));
        }
        self.push(
            Tensor::from_raw(Tensor::feature_shape(c, target), out),
            Op::Resize(x),
        )
    }

    /// Channel concatenation of two feature maps with equal spatial extents.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.spatial_xyz(), bv.spatial_xyz(), "concat spatial extents");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let shape = Tensor::feature_shape(av.channels() + bv.channels(), av.spatial_xyz());
        self.push(Tensor::from_raw(shape, data), Op::Concat(a, b))
    }

    /// Contiguous sub-vector `[start, start + len)` of a flat tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let data = self.value(x).data()[start..start + len].to_vec();
        self.push(Tensor::from_raw(vec![len], data), Op::Slice { x, start })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), Op::Add(a, b))
    }

    /// Scalar `Σ weights · x`.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "dot length");
        let v = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::Dot { x, weights })
    }

    /// Conditional instance normalization: per-channel spatial statistics,
    /// then `γ_c x̂ + β_c`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let s = xv.spatial_len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == c && b.len() == c, "instance_norm affine size");
        let mut xhat = vec![0.0; c * s];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * s];
        for ch in 0..c {
            let src = &xv.data()[ch * s..(ch + 1) * s];
            let mean = src.iter().sum::<f64>() / s as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for k in 0..s {
                let h = (src[k] - mean) * is;
                xhat[ch * s + k] = h;
                out[ch * s + k] = g[ch] * h + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_raw(shape, out),
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std },
        )
    }

    /// Conditional layer normalization over the channels of each voxel
    /// (each voxel is a token), then `γ_c x̂ + β_c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let s = xv.spatial_len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == c && b.len() == c, "layer_norm affine size");
        let d = xv.data();
        let mut xhat = vec![0.0; c * s];
        let mut inv_std = vec![0.0; s];
        let mut out = vec![0.0; c * s];
        for k in 0..s {
            let mean = (0..c).map(|ch| d[ch * s + k]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (d[ch * s + k] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[k] = is;
            for ch in 0..c {
                let h = (d[ch * s + k] - mean) * is;
                xhat[ch * s + k] = h;
                out[ch * s + k] = g[ch] * h + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_raw(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
        )
    }

    /// Reverse pass seeded with upstream gradients on one or more outputs.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(v, g) in seeds {
            assert_eq!(g.len(), self.value(v).len(), "seed gradient length");
            accumulate(&mut grads, v, g.len(), |dst| {
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s)
            });
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.value(v).len();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let (out, inp) = (g.len(), xv.len());
                accumulate(grads, *x, inp, |dx| {
                    for o in 0..out {
                        for k in 0..inp {
                            dx[k] += wv[o * inp + k] * g[o];
                        }
                    }
                });
                accumulate(grads, *w, out * inp, |dw| {
                    for o in 0..out {
                        for k in 0..inp {
                            dw[o * inp + k] += g[o] * xv[k];
                        }
                    }
                });
                accumulate(grads, *b, out, |db| db.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Conv3d { x, w, b } => self.conv3d_backward(g, *x, *w, *b, grads),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, xv.len(), |dx| {
                    for k in 0..xv.len() {
                        if xv[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, xv.len(), |dx| {
                    for k in 0..xv.len() {
                        dx[k] += if xv[k] > 0.0 { g[k] } else { slope * g[k] };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                accumulate(grads, *x, y.len(), |dx| {
                    for k in 0..y.len() {
                        dx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::AvgPool2(x) => {
                let xv = self.value(*x);
                let [nx, ny, nz] = xv.spatial_xyz();
                let (mx, my, mz) = (nx / 2, ny / 2, nz / 2);
                let (s, m) = (xv.spatial_len(), mx * my * mz);
                accumulate(grads, *x, xv.len(), |dx| {
                    for ch in 0..xv.channels() {
                        for z in 0..mz {
                            for y in 0..my {
                                for xx in 0..mx {
                                    let gv = g[ch * m + xx + mx * (y + my * z)] / 8.0;
                                    for k in 0..8 {
                                        let (a, b, d) = (k & 1, k >> 1 & 1, k >> 2 & 1);
                                        dx[ch * s + (2 * xx + a) + nx * ((2 * y + b) + ny * (2 * z + d))] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Resize(x) => {
                let xv = self.value(*x);
                let src = xv.spatial_xyz();
                let tgt = node.value.spatial_xyz();
                let (s, t) = (xv.spatial_len(), node.value.spatial_len());
                accumulate(grads, *x, xv.len(), |dx| {
                    for ch in 0..xv.channels() {
                        let back = resample_raw_adjoint(&g[ch * t..(ch + 1) * t], src, tgt);
                        dx[ch * s..(ch + 1) * s]
                            .iter_mut()
                            .zip(back)
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = len(*a);
                accumulate(grads, *a, na, |d| d.iter_mut().zip(&g[..na]).for_each(|(d, s)| *d += s));
                accumulate(grads, *b, g.len() - na, |d| {
                    d.iter_mut().zip(&g[na..]).for_each(|(d, s)| *d += s)
                });
            }
            Op::Slice { x, start } => {
                let n = len(*x);
                accumulate(grads, *x, n, |d| {
                    d[*start..*start + g.len()].iter_mut().zip(g).for_each(|(d, s)| *d += s)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    accumulate(grads, v, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                }
            }
            Op::Dot { x, weights } => {
                accumulate(grads, *x, weights.len(), |d| {
                    d.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w)
                });
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let xv = self.value(*x);
                let (c, s) = (xv.channels(), xv.spatial_len());
                let gam = self.value(*gamma).data();
                let groups: Vec<Vec<usize>> = (0..c).map(|ch| (ch * s..(ch + 1) * s).collect()).collect();
                let owner = |k: usize| k / s;
                norm_backward(g, xhat, inv_std, gam, &groups, owner, c, *x, *gamma, *beta, grads);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let xv = self.value(*x);
                let (c, s) = (xv.channels(), xv.spatial_len());
                let gam = self.value(*gamma).data();
                let groups: Vec<Vec<usize>> = (0..s).map(|k| (0..c).map(|ch| ch * s + k).collect()).collect();
                let owner = |k: usize| k / s;
                norm_backward(g, xhat, inv_std, gam, &groups, owner, c, *x, *gamma, *beta, grads);
            }
        }
    }

    fn conv3d_backward(&self, g: &[f64], x: Var, w: Var, b: Var, grads: &mut [Option<Vec<f64>>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (co, ci) = (wv.shape()[0], wv.shape()[1]);
        let dims = xv.spatial_xyz();
        let s = xv.spatial_len();

        let mut dx = vec![0.0; ci * s];
        dx.par_chunks_mut(s).enumerate().for_each(|(c, dst)| {
            for o in 0..co {
                let up = &g[o * s..(o + 1) * s];
                let kern = &wv.data()[(o * ci + c) * 27..(o * ci + c + 1) * 27];
                for (k, &wk) in kern.iter().enumerate() {
                    // out(p) reads in(p + off); the adjoint writes in(q) from out(q - off).
                    let [ox, oy, oz] = offset(k);
                    shifted_axpy(dst, up, dims, [-ox, -oy, -oz], wk);
                }
            }
        });
        let mut dw = vec![0.0; co * ci * 27];
        dw.par_chunks_mut(ci * 27).enumerate().for_each(|(o, dst)| {
            let up = &g[o * s..(o + 1) * s];
            for c in 0..ci {
                let src = &xv.data()[c * s..(c + 1) * s];
                for k in 0..27 {
                    dst[c * 27 + k] = shifted_dot(up, src, dims, offset(k));
                }
            }
        });
        let db: Vec<f64> = (0..co).map(|o| g[o * s..(o + 1) * s].iter().sum()).collect();
        accumulate(grads, x, ci * s, |d| d.iter_mut().zip(&dx).for_each(|(d, v)| *d += v));
        accumulate(grads, w, co * ci * 27, |d| d.iter_mut().zip(&dw).for_each(|(d, v)| *d += v));
        accumulate(grads, b, co, |d| d.iter_mut().zip(&db).for_each(|(d, v)| *d += v));
    }
}

/// Shared reverse pass of the affine normalizations. `groups` lists the
/// element indices sharing one mean/std, in the order of `inv_std`;
/// `owner(k)` is the channel (affine index) of element `k`.
#[allow(clippy::too_many_arguments)]
fn norm_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    groups: &[Vec<usize>],
    owner: impl Fn(usize) -> usize,
    channels: usize,
    x: Var,
    gv: Var,
    bv: Var,
    grads: &mut [Option<Vec<f64>>],
) {
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for k in 0..g.len() {
        let ch = owner(k);
        dgamma[ch] += g[k] * xhat[k];
        dbeta[ch] += g[k];
    }
    let mut dx = vec![0.0; g.len()];
    for (group, &is) in groups.iter().zip(inv_std) {
        let m = group.len() as f64;
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for &k in group {
            let d = g[k] * gamma[owner(k)];
            mean_d += d;
            mean_dx += d * xhat[k];
        }
        mean_d /= m;
        mean_dx /= m;
        for &k in group {
            let d = g[k] * gamma[owner(k)];
            dx[k] = is * (d - mean_d - xhat[k] * mean_dx);
        }
    }
    accumulate(grads, x, g.len(), |d| d.iter_mut().zip(&dx).for_each(|(d, v)| *d += v));
    accumulate(grads, gv, channels, |d| d.iter_mut().zip(&dgamma).for_each(|(d, v)| *d += v));
    accumulate(grads, bv, channels, |d| d.iter_mut().zip(&dbeta).for_each(|(d, v)| *d += v));
}

/// Margin that keeps sigmoid outputs, and trilinear blends of them, off 0 and 1.
pub const SIGMOID_MARGIN: f64 = 1e-12;

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}

/// Spatial offset of kernel tap `k` (`kx + 3 ky + 9 kz`), each in {-1, 0, 1}.
#[inline]
fn offset(k: usize) -> [isize; 3] {
    [(k % 3) as isize - 1, (k / 3 % 3) as isize - 1, (k / 9) as isize - 1]
}

/// Valid output range along one axis for a read at `p + off`.
#[inline]
fn valid(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// `dst(p) += w * src(p + off)` wherever `p + off` is inside the grid.
fn shifted_axpy(dst: &mut [f64], src: &[f64], dims: [usize; 3], off: [isize; 3], w: f64) {
    if w == 0.0 {
        return;
    }
    let [nx, ny, nz] = dims;
    let (x0, x1) = valid(nx, off[0]);
    let (y0, y1) = valid(ny, off[1]);
    let (z0, z1) = valid(nz, off[2]);
    for z in z0..z1 {
        let sz = (z as isize + off[2]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + off[1]) as usize;
            let drow = x0 + nx * (y + ny * z);
            let srow = (x0 as isize + off[0]) as usize + nx * (sy + ny * sz);
            let len = x1 - x0;
            for (d, s) in dst[drow..drow + len].iter_mut().zip(&src[srow..srow + len]) {
                *d += w * s;
            }
        }
    }
}

/// `Σ_p a(p) b(p + off)` over valid `p`.
fn shifted_dot(a: &[f64], b: &[f64], dims: [usize; 3], off: [isize; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let (x0, x1) = valid(nx, off[0]);
    let (y0, y1) = valid(ny, off[1]);
    let (z0, z1) = valid(nz, off[2]);
    let mut acc = 0.0;
    for z in z0..z1 {
        let sz = (z as isize + off[2]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + off[1]) as usize;
            let arow = x0 + nx * (y + ny * z);
            let brow = (x0 as isize + off[0]) as usize + nx * (sy + ny * sz);
            let len = x1 - x0;
            acc += a[arow..arow + len]
                .iter()
                .zip(&b[brow..brow + len])
                .map(|(p, q)| p * q)
                .sum::<f64>();
        }
    }
    acc
}
