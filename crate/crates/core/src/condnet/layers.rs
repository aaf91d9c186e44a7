use rand::Rng;

use super::params::{he_normal, ParamStore, ParamVars};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::grid::{GridShape, Volume};
use crate::losses::WeightVolume;

/// Hidden width of every hyper-MLP.
pub const HYPER_HIDDEN: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Affine parameters of one conditional normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct CondNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta_norm: f64,
}

pub(crate) fn check_eta_norm(eta_norm: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta_norm) {
        return Err(Error::InvalidArgument(format!(
            "normalized eta must lie in [0, 1], got {eta_norm}"
        )));
    }
    Ok(())
}

/// `η_norm → (γ, β)` map of one normalization site: `1 → 64 → 64 → 2C`
/// with ReLU, the last layer initialized to output `γ = 1, β = 0`.
#[derive(Clone, Debug)]
pub struct HyperMlp {
    prefix: String,
    channels: usize,
}

impl HyperMlp {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let h = HYPER_HIDDEN;
        let c = self.channels;
        store.insert(self.name("l1.w"), he_normal(vec![h, 1], 1, rng));
        // Non-zero first-layer biases keep the hidden units alive at η = 0.
        store.insert(self.name("l1.b"), he_normal(vec![h], 2, rng));
        store.insert(self.name("l2.w"), he_normal(vec![h, h], h, rng));
        store.insert(self.name("l2.b"), Tensor::zeros(vec![h]));
        store.insert(self.name("l3.w"), Tensor::zeros(vec![2 * c, h]));
        let mut bias = vec![0.0; 2 * c];
        bias[..c].fill(1.0);
        store.insert(self.name("l3.b"), Tensor::from_raw(vec![2 * c], bias));
    }

    /// Records the MLP; returns `(γ, β)`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, eta: Var) -> (Var, Var) {
        let p = |n: &str| vars.get(&self.name(n));
        let h1 = tape.linear(eta, p("l1.w"), p("l1.b"));
        let h1 = tape.relu(h1);
        let h2 = tape.linear(h1, p("l2.w"), p("l2.b"));
        let h2 = tape.relu(h2);
        let out = tape.linear(h2, p("l3.w"), p("l3.b"));
        let c = self.channels;
        (tape.slice(out, 0, c), tape.slice(out, c, c))
    }
}

/// Evaluates one hyper-MLP outside of any training graph.
pub fn hyper_mlp(mlp: &HyperMlp, store: &ParamStore, eta_norm: f64) -> Result<CondNormParams> {
    check_eta_norm(eta_norm)?;
    let mut tape = Tape::new();
    let vars = store.register(&mut tape);
    let eta = tape.leaf(Tensor::scalar(eta_norm));
    let (g, b) = mlp.forward(&mut tape, &vars, eta);
    Ok(CondNormParams {
        gamma: tape.value(g).data().to_vec(),
        beta: tape.value(b).data().to_vec(),
        eta_norm,
    })
}

fn norm_with(h: &Tensor, p: &CondNormParams, layer: bool) -> Result<Tensor> {
    if h.shape().len() != 4 || h.is_empty() {
        return Err(Error::InvalidShape(format!(
            "expected a non-empty [c, z, y, x] block, got {:?}",
            h.shape()
        )));
    }
    let c = h.channels();
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "{c} channels but {} / {} affine parameters",
            p.gamma.len(),
            p.beta.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(h.clone());
    let g = tape.leaf(Tensor::from_raw(vec![c], p.gamma.clone()));
    let b = tape.leaf(Tensor::from_raw(vec![c], p.beta.clone()));
    let y = if layer {
        tape.layer_norm(x, g, b)
    } else {
        tape.instance_norm(x, g, b)
    };
    Ok(tape.value(y).clone())
}

/// Conditional layer normalization: statistics over the channels of each voxel.
pub fn cln(h: &Tensor, params: &CondNormParams) -> Result<Tensor> {
    norm_with(h, params, true)
}

/// Conditional instance normalization: per-channel statistics over space.
pub fn cin(h: &Tensor, params: &CondNormParams) -> Result<Tensor> {
    norm_with(h, params, false)
}

/// Three 3×3×3 convolutions `C → C/2 → C/4 → 1` with LeakyReLU(0.2) in
/// between and a terminal sigmoid, evaluated at 1/4 resolution and
/// upsampled to the full grid.
#[derive(Clone, Debug)]
pub struct WeightHead {
    prefix: String,
    channels: usize,
}

impl WeightHead {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        assert!(channels >= 4 && channels.is_multiple_of(4), "head channels must be a multiple of 4");
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    fn plan(&self) -> [(usize, usize); 3] {
        let c = self.channels;
        [(c, c / 2), (c / 2, c / 4), (c / 4, 1)]
    }

    fn name(&self, layer: usize, p: &str) -> String {
        format!("{}.conv{layer}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (i, (ci, co)) in self.plan().into_iter().enumerate() {
            store.insert(self.name(i, "w"), he_normal(vec![co, ci, 3, 3, 3], ci * 27, rng));
            store.insert(self.name(i, "b"), Tensor::zeros(vec![co]));
        }
    }

    /// Records the head; returns the full-resolution weight map `[1, z, y, x]`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, features: Var, grid: &GridShape) -> Result<Var> {
        let f = tape.value(features);
        let full = grid.dims_xyz();
        let quarter = full.map(|n| n.div_ceil(4));
        if f.shape().len() != 4 || f.spatial_xyz() != quarter || f.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "weight head expects [{}, {}, {}, {}], got {:?}",
                self.channels, quarter[2], quarter[1], quarter[0],
                f.shape()
            )));
        }
        let mut h = features;
        for i in 0..3 {
            h = tape.conv3d(h, vars.get(&self.name(i, "w")), vars.get(&self.name(i, "b")));
            h = if i < 2 { tape.leaky_relu(h, LEAKY_SLOPE) } else { tape.sigmoid(h) };
        }
        Ok(tape.resize(h, full))
    }
}

/// Evaluates the weight head on a 1/4-resolution feature block.
pub fn weight_head_forward(
    head: &WeightHead,
    store: &ParamStore,
    features: &Tensor,
    grid: &GridShape,
) -> Result<WeightVolume> {
    let mut tape = Tape::new();
    let vars = store.register(&mut tape);
    let f = tape.leaf(features.clone());
    let w = head.forward(&mut tape, &vars, f, grid)?;
    let data = tape.value(w).data().to_vec();
    WeightVolume::new(Volume::new(*grid, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error, sample_indices, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_block(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn identity(c: usize) -> CondNormParams {
        CondNormParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            eta_norm: 0.0,
        }
    }

    #[test]
    fn initialized_mlp_is_identity_affine() {
        let mut store = ParamStore::new();
        let mlp = HyperMlp::new("m", 5);
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for eta in [0.0, 0.3, 1.0] {
            let p = hyper_mlp(&mlp, &store, eta).unwrap();
            assert_eq!(p.gamma, vec![1.0; 5]);
            assert_eq!(p.beta, vec![0.0; 5]);
        }
        assert!(hyper_mlp(&mlp, &store, 1.5).is_err());
    }

    #[test]
    fn random_mlp_distinguishes_eta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = HyperMlp::new("m", 3);
        mlp.init(&mut store, &mut rng);
        store.perturb(0.5, &mut rng);
        let a = hyper_mlp(&mlp, &store, 0.1).unwrap();
        let b = hyper_mlp(&mlp, &store, 0.9).unwrap();
        assert_ne!(a.gamma, b.gamma);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = HyperMlp::new("m", 4);
        mlp.init(&mut store, &mut rng);
        store.perturb(0.3, &mut rng);
        let wg = [0.3, -1.2, 0.7, 0.1];
        let wb = [1.1, 0.4, -0.5, 0.9];
        let eval = |store: &ParamStore| {
            let p = hyper_mlp(&mlp, store, 0.6).unwrap();
            p.gamma.iter().zip(&wg).map(|(a, b)| a * b).sum::<f64>()
                + p.beta.iter().zip(&wb).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let vars = store.register(&mut tape);
        let eta = tape.leaf(Tensor::scalar(0.6));
        let (g, b) = mlp.forward(&mut tape, &vars, eta);
        let grads = tape.backward(&[(g, &wg), (b, &wb)]);
        let analytic = vars.flat_gradient(&tape, &grads);
        let x0 = store.flatten();
        let idx = sample_indices(x0.len(), 200, 3);
        let numeric = finite_difference(
            |x| {
                let mut s = store.clone();
                s.load_flat(x).unwrap();
                eval(&s)
            },
            &x0,
            &idx,
            FD_STEP,
        );
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        assert!(relative_error(&picked, &numeric) < 1e-4);
    }

    #[test]
    fn identity_affine_is_plain_normalization() {
        let h = rand_block(vec![3, 2, 3, 4], 5);
        let s = h.spatial_len();
        let out = cin(&h, &identity(3)).unwrap();
        for c in 0..3 {
            let src = &h.data()[c * s..(c + 1) * s];
            let mean = src.iter().sum::<f64>() / s as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            for k in 0..s {
                let want = (src[k] - mean) * (1.0 / (var + 1e-5).sqrt());
                assert_eq!(out.data()[c * s + k], want);
            }
        }
        let out = cln(&h, &identity(3)).unwrap();
        for k in 0..s {
            let col: Vec<f64> = (0..3).map(|c| h.data()[c * s + k]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            for c in 0..3 {
                let want = (col[c] - mean) * (1.0 / (var + 1e-5).sqrt());
                assert_eq!(out.data()[c * s + k], want);
            }
        }
    }

    #[test]
    fn constant_or_single_voxel_input_gives_beta() {
        let p = CondNormParams {
            gamma: vec![2.0, -3.0],
            beta: vec![0.25, -0.5],
            eta_norm: 0.5,
        };
        let h = Tensor::new(vec![2, 2, 2, 2], vec![7.0; 16]).unwrap();
        let out = cln(&h, &p).unwrap();
        for (k, v) in out.data().iter().enumerate() {
            assert!((v - p.beta[k / 8]).abs() < 1e-12);
        }
        let h = Tensor::new(vec![2, 1, 1, 1], vec![3.0, -4.0]).unwrap();
        assert_eq!(cin(&h, &p).unwrap().data(), &[0.25, -0.5]);
    }

    #[test]
    fn output_statistics_follow_affine() {
        let h = rand_block(vec![4, 4, 4, 4], 8);
        let p = CondNormParams {
            gamma: vec![2.0, 0.5, -1.5, 1.0],
            beta: vec![0.3, -0.2, 1.0, 0.0],
            eta_norm: 0.2,
        };
        let out = cin(&h, &p).unwrap();
        let s = h.spatial_len();
        for c in 0..4 {
            let ch = &out.data()[c * s..(c + 1) * s];
            let mean = ch.iter().sum::<f64>() / s as f64;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64).sqrt();
            assert!((mean - p.beta[c]).abs() < 1e-3);
            assert!((std - p.gamma[c].abs()).abs() < 1e-3);
        }
    }

    /// Gradcheck of a normalization w.r.t. its input and affine parameters.
    fn check_norm(layer: bool) {
        let h = rand_block(vec![3, 2, 3, 3], 11);
        let gb = rand_block(vec![6], 12);
        let r = rand_block(h.shape().to_vec(), 13);
        let eval = |x: &[f64]| {
            let n = h.len();
            let hh = Tensor::new(h.shape().to_vec(), x[..n].to_vec()).unwrap();
            let p = CondNormParams {
                gamma: x[n..n + 3].to_vec(),
                beta: x[n + 3..].to_vec(),
                eta_norm: 0.0,
            };
            let out = if layer { cln(&hh, &p) } else { cin(&hh, &p) }.unwrap();
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(h.clone());
        let g = tape.leaf(Tensor::new(vec![3], gb.data()[..3].to_vec()).unwrap());
        let b = tape.leaf(Tensor::new(vec![3], gb.data()[3..].to_vec()).unwrap());
        let y = if layer { tape.layer_norm(x, g, b) } else { tape.instance_norm(x, g, b) };
        let grads = tape.backward(&[(y, r.data())]);
        let mut analytic = grads.get(x).unwrap().to_vec();
        analytic.extend(grads.get(g).unwrap());
        analytic.extend(grads.get(b).unwrap());
        let mut x0 = h.data().to_vec();
        x0.extend(gb.data());
        let idx: Vec<usize> = (0..x0.len()).collect();
        let numeric = finite_difference(eval, &x0, &idx, FD_STEP);
        assert!(relative_error(&analytic, &numeric) < 1e-4, "layer={layer}");
    }

    #[test]
    fn cin_gradcheck() {
        check_norm(false);
    }

    #[test]
    fn cln_gradcheck() {
        check_norm(true);
    }

    #[test]
    fn zero_head_gives_half() {
        let grid = GridShape::cube(32).unwrap();
        let head = WeightHead::new("h", 8);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let zeros = vec![0.0; store.num_scalars()];
        store.load_flat(&zeros).unwrap();
        let feats = rand_block(vec![8, 8, 8, 8], 1);
        let w = weight_head_forward(&head, &store, &feats, &grid).unwrap();
        assert_eq!(w.shape(), &grid);
        assert!(w.data().iter().all(|&v| v == 0.5));
        let bad = rand_block(vec![8, 4, 8, 8], 1);
        assert!(weight_head_forward(&head, &store, &bad, &grid).is_err());
    }

    #[test]
    fn head_gradcheck() {
        let grid = GridShape::cube(8).unwrap();
        let head = WeightHead::new("h", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut rng);
        store.perturb(0.1, &mut rng);
        let feats = rand_block(vec![8, 2, 2, 2], 5);
        let r = rand_block(vec![grid.len()], 6);
        let eval = |s: &ParamStore, f: &Tensor| {
            let w = weight_head_forward(&head, s, f, &grid).unwrap();
            w.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let vars = store.register(&mut tape);
        let fv = tape.leaf(feats.clone());
        let out = head.forward(&mut tape, &vars, fv, &grid).unwrap();
        let grads = tape.backward(&[(out, r.data())]);
        let mut analytic = vars.flat_gradient(&tape, &grads);
        analytic.extend(grads.get(fv).unwrap());
        let np = store.num_scalars();
        let mut x0 = store.flatten();
        x0.extend(feats.data());
        let idx = sample_indices(x0.len(), 300, 7);
        let numeric = finite_difference(
            |x| {
                let mut s = store.clone();
                s.load_flat(&x[..np]).unwrap();
                eval(&s, &Tensor::new(feats.shape().to_vec(), x[np..].to_vec()).unwrap())
            },
            &x0,
            &idx,
            FD_STEP,
        );
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        assert!(relative_error(&picked, &numeric) < 1e-3);
    }
}
