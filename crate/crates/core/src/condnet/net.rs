use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{check_eta_norm, HyperMlp, WeightHead, LEAKY_SLOPE};
use super::params::{he_normal, ParamStore, ParamVars};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::grid::{check_same, FieldKind, GridShape, VectorField, Volume};
use crate::losses::WeightVolume;

/// Channels at full and half resolution; the bottleneck keeps the second.
pub const UNET_CHANNELS: [usize; 2] = [8, 16];

/// Convolution blocks `(name, in, out)`; each is followed by CIN and LeakyReLU.
const BLOCKS: [(&str, usize, usize); 5] = [
    ("enc0", 2, UNET_CHANNELS[0]),
    ("enc1", UNET_CHANNELS[0], UNET_CHANNELS[1]),
    ("bott", UNET_CHANNELS[1], UNET_CHANNELS[1]),
    ("dec1", 2 * UNET_CHANNELS[1], UNET_CHANNELS[1]),
    ("dec0", UNET_CHANNELS[1] + UNET_CHANNELS[0], UNET_CHANNELS[0]),
];

/// Token site applying CLN to the flattened bottleneck features.
const TOKEN_SITE: &str = "tok";

/// Toy conditional encoder-decoder.
///
/// ```text
/// [I_m, I_f] -> enc0 (8, 1) -> pool -> enc1 (16, 1/2) -> pool -> bott (16, 1/4) -> CLN
///   CLN -> weight head -> ω
///   CLN -> up ++ enc1 -> dec1 (16, 1/2) -> up ++ enc0 -> dec0 (8, 1) -> flow (3, 1) -> v
/// ```
///
/// Every convolution block is normalized with CIN whose `(γ, β)` come from a
/// per-site hyper-MLP of `η_norm`.
#[derive(Clone, Debug)]
pub struct ToyCondUnet {
    params: ParamStore,
    head: WeightHead,
}

/// Handles into a recorded forward pass.
#[derive(Clone, Debug)]
pub struct UnetGraph {
    pub params: ParamVars,
    pub eta: Var,
    pub velocity: Var,
    pub features: Var,
    pub omega: Var,
}

fn site_mlp(site: &str, channels: usize) -> HyperMlp {
    HyperMlp::new(format!("{site}.mlp"), channels)
}

impl ToyCondUnet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, ci, co) in BLOCKS {
            params.insert(format!("{name}.conv.w"), he_normal(vec![co, ci, 3, 3, 3], ci * 27, &mut rng));
            params.insert(format!("{name}.conv.b"), Tensor::zeros(vec![co]));
            site_mlp(name, co).init(&mut params, &mut rng);
        }
        site_mlp(TOKEN_SITE, UNET_CHANNELS[1]).init(&mut params, &mut rng);
        let c0 = UNET_CHANNELS[0];
        params.insert("flow.w", Tensor::zeros(vec![3, c0, 3, 3, 3]));
        params.insert("flow.b", Tensor::zeros(vec![3]));
        let head = WeightHead::new("head", UNET_CHANNELS[1]);
        head.init(&mut params, &mut rng);
        Self { params, head }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let reference = Self::new(0);
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint lacks parameter {name} with shape {:?}",
                        t.shape()
                    )))
                }
            }
        }
        Ok(Self {
            params,
            head: reference.head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_inputs(moving: &Volume, fixed: &Volume) -> Result<()> {
        check_same(moving.shape(), fixed.shape(), "moving/fixed")?;
        let dims = moving.shape().dims_xyz();
        if dims.iter().any(|n| n % 4 != 0) {
            return Err(Error::InvalidShape(format!(
                "network input extents must be divisible by 4, got {dims:?}"
            )));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, moving: &Volume, fixed: &Volume, eta_norm: f64) -> Result<UnetGraph> {
        Self::check_inputs(moving, fixed)?;
        check_eta_norm(eta_norm)?;
        let grid = *moving.shape();
        let full = grid.dims_xyz();
        let half = full.map(|n| n / 2);

        let params = self.params.register(tape);
        let eta = tape.leaf(Tensor::scalar(eta_norm));
        let mut input = moving.data().to_vec();
        input.extend_from_slice(fixed.data());
        let x = tape.leaf(Tensor::from_raw(Tensor::feature_shape(2, full), input));

        let block = |tape: &mut Tape, name: &str, h: Var| {
            let co = BLOCKS.iter().find(|b| b.0 == name).expect("known block").2;
            let h = tape.conv3d(h, params.get(&format!("{name}.conv.w")), params.get(&format!("{name}.conv.b")));
            let (g, b) = site_mlp(name, co).forward(tape, &params, eta);
            let h = tape.instance_norm(h, g, b);
            tape.leaky_relu(h, LEAKY_SLOPE)
        };

        let e0 = block(tape, "enc0", x);
        let p0 = tape.avg_pool2(e0);
        let e1 = block(tape, "enc1", p0);
        let p1 = tape.avg_pool2(e1);
        let bott = block(tape, "bott", p1);
        let (g, b) = site_mlp(TOKEN_SITE, UNET_CHANNELS[1]).forward(tape, &params, eta);
        let features = tape.layer_norm(bott, g, b);

        let u1 = tape.resize(features, half);
        let c1 = tape.concat(u1, e1);
        let d1 = block(tape, "dec1", c1);
        let u0 = tape.resize(d1, full);
        let c0 = tape.concat(u0, e0);
        let d0 = block(tape, "dec0", c0);
        let velocity = tape.conv3d(d0, params.get("flow.w"), params.get("flow.b"));

        let omega = self.head.forward(tape, &params, features, &grid)?;
        Ok(UnetGraph {
            params,
            eta,
            velocity,
            features,
            omega,
        })
    }

    /// Velocity field and weight volume for one input pair.
    pub fn predict(&self, moving: &Volume, fixed: &Volume, eta_norm: f64) -> Result<(VectorField, WeightVolume)> {
        let mut tape = Tape::new();
        let g = self.forward(&mut tape, moving, fixed, eta_norm)?;
        let grid = *moving.shape();
        Ok((
            velocity_field(&tape, g.velocity, grid),
            WeightVolume::new(Volume::new(grid, tape.value(g.omega).data().to_vec())?)?,
        ))
    }
}

/// Interprets a `[3, z, y, x]` tape value as a velocity field.
pub(crate) fn velocity_field(tape: &Tape, v: Var, grid: GridShape) -> VectorField {
    VectorField::from_raw(grid, FieldKind::Velocity, tape.value(v).data().to_vec())
}

/// Runs the network and returns the velocity field and the 1/4-resolution
/// features that feed the weight head.
pub fn toy_condunet(net: &ToyCondUnet, moving: &Volume, fixed: &Volume, eta_norm: f64) -> Result<(VectorField, Tensor)> {
    let mut tape = Tape::new();
    let g = net.forward(&mut tape, moving, fixed, eta_norm)?;
    Ok((
        velocity_field(&tape, g.velocity, *moving.shape()),
        tape.value(g.features).clone(),
    ))
}
