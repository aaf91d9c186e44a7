//! Finite-difference checks of every differentiable operation, on random
//! double-precision instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference, sample_indices, GradCheck, FD_STEP};
use crate::condnet::{HyperMlp, ParamStore, Tape, Tensor, ToyCondUnet, WeightHead};
use crate::diffeo::Integrator;
use crate::error::{Error, Result};
use crate::grid::{compose, compose_backward, warp, warp_adjoint, warp_gradient, FieldKind, GridShape, LabelMap, VectorField, Volume};
use crate::losses::{diffusion_energy, local_ncc, log_loss, soft_dice_loss, weighted_diffusion_energy, WeightVolume};
use crate::optim::{instance_objective, InstanceParams, Objective, RegistrationConfig};

/// Tolerance for the scalar losses other than NCC.
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Tolerance for NCC and for every non-loss operation.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per check.
pub const PROBES: usize = 120;

struct Ctx {
    rng: ChaCha8Rng,
    shape: GridShape,
    seed: u64,
}

impl Ctx {
    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    fn volume(&mut self, lo: f64, hi: f64) -> Volume {
        let n = self.shape.len();
        Volume::new(self.shape, self.uniform(n, lo, hi)).unwrap()
    }

    fn field(&mut self, kind: FieldKind, amp: f64) -> VectorField {
        let n = 3 * self.shape.len();
        VectorField::new(self.shape, kind, self.uniform(n, -amp, amp)).unwrap()
    }

    /// Compares `analytic` against central differences of `f` at `x0` on a
    /// sample of coordinates.
    fn check(
        &mut self,
        name: &str,
        analytic: &[f64],
        f: impl FnMut(&[f64]) -> f64,
        x0: &[f64],
        tolerance: f64,
        step: f64,
    ) -> GradCheck {
        self.seed = self.seed.wrapping_add(1);
        let idx = sample_indices(x0.len(), PROBES, self.seed);
        let numeric = finite_difference(f, x0, &idx, step);
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        GradCheck::new(name, &picked, &numeric, tolerance)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

/// Runs the whole suite on `size³` grids (4 ≤ size ≤ 8).
pub fn run_suite(size: usize, seed: u64) -> Result<Vec<GradCheck>> {
    if !(4..=8).contains(&size) {
        return Err(Error::InvalidArgument(format!("gradcheck size must be in 4..=8, got {size}")));
    }
    let shape = GridShape::cube(size)?;
    let mut c = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        shape,
        seed,
    };
    let n = shape.len();
    let mut out = Vec::new();

    // NCC with respect to the warped image.
    let a = c.volume(0.0, 1.0);
    let b = c.volume(0.0, 1.0);
    let (_, g) = local_ncc(&a, &b, 3)?;
    out.push(c.check(
        "ncc",
        g.data(),
        |x| local_ncc(&Volume::new(shape, x.to_vec()).unwrap(), &b, 3).unwrap().0,
        a.data(),
        OP_TOLERANCE,
        FD_STEP,
    ));

    let wa = [c.volume(0.05, 0.95), c.volume(0.05, 0.95)];
    let fb = [c.volume(0.0, 1.0), c.volume(0.0, 1.0)];
    let (_, g) = soft_dice_loss(&wa, &fb)?;
    let split = |x: &[f64]| {
        [
            Volume::new(shape, x[..n].to_vec()).unwrap(),
            Volume::new(shape, x[n..].to_vec()).unwrap(),
        ]
    };
    out.push(c.check(
        "dice_loss",
        &concat(g[0].data(), g[1].data()),
        |x| soft_dice_loss(&split(x), &fb).unwrap().0,
        &concat(wa[0].data(), wa[1].data()),
        LOSS_TOLERANCE,
        FD_STEP,
    ));

    let u = c.field(FieldKind::Displacement, 1.0);
    let as_field = |x: &[f64]| VectorField::new(shape, FieldKind::Displacement, x.to_vec()).unwrap();
    let (_, g) = diffusion_energy(&u);
    out.push(c.check(
        "diffusion",
        g.data(),
        |x| diffusion_energy(&as_field(x)).0,
        u.data(),
        LOSS_TOLERANCE,
        FD_STEP,
    ));

    let omega = WeightVolume::new(c.volume(0.05, 1.0))?;
    let (_, gu, gw) = weighted_diffusion_energy(&u, &omega)?;
    out.push(c.check(
        "weighted_diffusion",
        &concat(gu.data(), gw.data()),
        |x| {
            let w = WeightVolume::new(Volume::new(shape, x[3 * n..].to_vec()).unwrap()).unwrap();
            weighted_diffusion_energy(&as_field(&x[..3 * n]), &w).unwrap().0
        },
        &concat(u.data(), omega.data()),
        LOSS_TOLERANCE,
        FD_STEP,
    ));

    let eps = 1e-4;
    let (_, g) = log_loss(&omega, eps)?;
    out.push(c.check(
        "log_loss",
        g.data(),
        |x| log_loss(&WeightVolume::new(Volume::new(shape, x.to_vec()).unwrap()).unwrap(), eps).unwrap().0,
        omega.data(),
        LOSS_TOLERANCE,
        FD_STEP,
    ));

    // Warp, with respect to the displacement and to the image.
    let img = c.volume(0.0, 1.0);
    let r = c.volume(-1.0, 1.0);
    let ud = c.field(FieldKind::Displacement, 1.5);
    let g = warp_gradient(&img, &ud, &r)?;
    out.push(c.check(
        "warp_displacement",
        g.data(),
        |x| dot(warp(&img, &as_field(x)).unwrap().data(), r.data()),
        ud.data(),
        OP_TOLERANCE,
        FD_STEP,
    ));
    let g = warp_adjoint(&ud, &r)?;
    out.push(c.check(
        "warp_image",
        g.data(),
        |x| dot(warp(&Volume::new(shape, x.to_vec()).unwrap(), &ud).unwrap().data(), r.data()),
        img.data(),
        OP_TOLERANCE,
        FD_STEP,
    ));

    let ua = c.field(FieldKind::Displacement, 1.2);
    let ub = c.field(FieldKind::Displacement, 1.2);
    let r3 = c.uniform(3 * n, -1.0, 1.0);
    let (ga, gb) = compose_backward(&ua, &ub, &as_field(&r3))?;
    out.push(c.check(
        "compose",
        &concat(ga.data(), gb.data()),
        |x| dot(compose(&as_field(&x[..3 * n]), &as_field(&x[3 * n..])).unwrap().data(), &r3),
        &concat(ua.data(), ub.data()),
        OP_TOLERANCE,
        FD_STEP,
    ));

    for (name, integ) in [
        ("exp_ss", Integrator::ScalingSquaring { steps: 7 }),
        ("tvf", Integrator::TimeStepped { steps: 3 }),
        ("tvf_ss", Integrator::TimeSteppedSs { time_steps: 2, ss_steps: 3 }),
    ] {
        let k = integ.num_fields();
        let vs: Vec<VectorField> = (0..k).map(|_| c.field(FieldKind::Velocity, 1.5)).collect();
        let flow = integ.forward(&vs)?;
        let grads = flow.backward(&as_field(&r3));
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        let x0: Vec<f64> = vs.iter().flat_map(|v| v.data().iter().copied()).collect();
        out.push(c.check(
            name,
            &analytic,
            |x| {
                let fields: Vec<VectorField> = x
                    .chunks(3 * n)
                    .map(|ch| VectorField::new(shape, FieldKind::Velocity, ch.to_vec()).unwrap())
                    .collect();
                dot(integ.forward(&fields).unwrap().displacement.data(), &r3)
            },
            &x0,
            OP_TOLERANCE,
            FD_STEP,
        ));
    }

    // Conditional normalizations, with respect to input and affine parameters.
    let ch = 3;
    let tshape = vec![ch, size, size, size];
    let h = Tensor::new(tshape.clone(), c.uniform(ch * n, -2.0, 2.0))?;
    let gb0 = c.uniform(2 * ch, -1.5, 1.5);
    let rt = c.uniform(ch * n, -1.0, 1.0);
    for (name, layer) in [("cin", false), ("cln", true)] {
        let run = |x: &[f64], seed: Option<&[f64]>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(tshape.clone(), x[..ch * n].to_vec()).unwrap());
            let g = tape.leaf(Tensor::new(vec![ch], x[ch * n..ch * n + ch].to_vec()).unwrap());
            let b = tape.leaf(Tensor::new(vec![ch], x[ch * n + ch..].to_vec()).unwrap());
            let y = if layer { tape.layer_norm(xv, g, b) } else { tape.instance_norm(xv, g, b) };
            let value = dot(tape.value(y).data(), &rt);
            let grad = seed.map(|s| {
                let grads = tape.backward(&[(y, s)]);
                let mut v = grads.get_or_zeros(xv, ch * n);
                v.extend(grads.get_or_zeros(g, ch));
                v.extend(grads.get_or_zeros(b, ch));
                v
            });
            (value, grad)
        };
        let x0 = concat(h.data(), &gb0);
        let analytic = run(&x0, Some(&rt)).1.unwrap();
        out.push(c.check(name, &analytic, |x| run(x, None).0, &x0, OP_TOLERANCE, FD_STEP));
    }

    // Hyper-MLP parameters, through both γ and β.
    let mlp = HyperMlp::new("m", ch);
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut c.rng);
    store.perturb(0.3, &mut c.rng);
    let rg = c.uniform(ch, -1.0, 1.0);
    let rb = c.uniform(ch, -1.0, 1.0);
    let eta = 0.6;
    let mlp_eval = |s: &ParamStore| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = s.register(&mut tape);
        let e = tape.leaf(Tensor::scalar(eta));
        let (g, b) = mlp.forward(&mut tape, &vars, e);
        let value = dot(tape.value(g).data(), &rg) + dot(tape.value(b).data(), &rb);
        let grads = tape.backward(&[(g, &rg), (b, &rb)]);
        (value, vars.flat_gradient(&tape, &grads))
    };
    let analytic = mlp_eval(&store).1;
    let x0 = store.flatten();
    out.push(c.check(
        "hyper_mlp",
        &analytic,
        |x| {
            let mut s = store.clone();
            s.load_flat(x).unwrap();
            mlp_eval(&s).0
        },
        &x0,
        OP_TOLERANCE,
        FD_STEP,
    ));

    // Weight head, with respect to its parameters and input features.
    let fc = 8;
    let low = size.div_ceil(4);
    let head = WeightHead::new("h", fc);
    let mut store = ParamStore::new();
    head.init(&mut store, &mut c.rng);
    store.perturb(0.1, &mut c.rng);
    let fshape = vec![fc, low, low, low];
    let feats = c.uniform(fc * low * low * low, -2.0, 2.0);
    let rw = c.uniform(n, -1.0, 1.0);
    let np = store.num_scalars();
    let head_eval = |s: &ParamStore, f: &[f64], grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = s.register(&mut tape);
        let fv = tape.leaf(Tensor::new(fshape.clone(), f.to_vec()).unwrap());
        let y = head.forward(&mut tape, &vars, fv, &shape).unwrap();
        let value = dot(tape.value(y).data(), &rw);
        if !grad {
            return (value, Vec::new());
        }
        let grads = tape.backward(&[(y, &rw)]);
        let mut g = vars.flat_gradient(&tape, &grads);
        g.extend(grads.get_or_zeros(fv, f.len()));
        (value, g)
    };
    let analytic = head_eval(&store, &feats, true).1;
    out.push(c.check(
        "weight_head",
        &analytic,
        |x| {
            let mut s = store.clone();
            s.load_flat(&x[..np]).unwrap();
            head_eval(&s, &x[np..], false).0
        },
        &concat(&store.flatten(), &feats),
        OP_TOLERANCE,
        FD_STEP,
    ));

    // The toy network end to end, from parameters to velocity and weights.
    let net_shape = GridShape::cube(8)?;
    let nn = net_shape.len();
    let mut net = ToyCondUnet::new(c.rng.random());
    net.params_mut().perturb(0.1, &mut c.rng);
    let m = Volume::new(net_shape, c.uniform(nn, 0.0, 1.0))?;
    let f = Volume::new(net_shape, c.uniform(nn, 0.0, 1.0))?;
    let rv = c.uniform(3 * nn, -1.0, 1.0);
    let ro = c.uniform(nn, -1.0, 1.0);
    let mut tape = Tape::new();
    let g = net.forward(&mut tape, &m, &f, 0.4)?;
    let grads = tape.backward(&[(g.velocity, &rv), (g.omega, &ro)]);
    let analytic = g.params.flat_gradient(&tape, &grads);
    let x0 = net.params().flatten();
    out.push(c.check(
        "toy_network",
        &analytic,
        |x| {
            let mut s = net.params().clone();
            s.load_flat(x).unwrap();
            let (v, w) = ToyCondUnet::from_params(s).unwrap().predict(&m, &f, 0.4).unwrap();
            dot(v.data(), &rv) + dot(w.data(), &ro)
        },
        &x0,
        OP_TOLERANCE,
        // Small enough that no LeakyReLU pre-activation crosses zero.
        1e-6,
    ));

    // The full instance objective: similarity with Dice, weighted diffusion
    // and log loss, through scaling and squaring and the weight upsampling.
    let mov = c.volume(0.0, 1.0);
    let fix = c.volume(0.0, 1.0);
    let lm = LabelMap::from_fn(shape, |x, y, _| u32::from(x + y >= size));
    let lf = LabelMap::from_fn(shape, |x, _, z| u32::from(x + z >= size));
    let cfg = RegistrationConfig {
        eta: 0.5,
        ncc_window: 3,
        use_dice: true,
        integrator: Integrator::ScalingSquaring { steps: 4 },
        ..Default::default()
    };
    let obj = Objective::new(&mov, &fix, Some((&lm, &lf)), &cfg)?;
    let mut params = InstanceParams::zeros(&shape, 1);
    let mut x0 = params.flatten();
    let nl = x0.len() - 3 * n;
    let init = concat(&c.uniform(3 * n, -0.8, 0.8), &c.uniform(nl, -1.5, 1.5));
    x0.copy_from_slice(&init);
    params.load_flat(&x0);
    let (_, _, analytic) = instance_objective(&obj, &params)?;
    out.push(c.check(
        "objective",
        &analytic,
        |x| {
            let mut p = params.clone();
            p.load_flat(x);
            instance_objective(&obj, &p).unwrap().0.terms.total
        },
        &x0,
        OP_TOLERANCE,
        FD_STEP,
    ));

    Ok(out)
}
