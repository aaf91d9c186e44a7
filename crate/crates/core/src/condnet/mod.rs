//! Minimal differentiable network pieces for η-conditioned registration:
//! a reverse-mode tape, 3D convolutions, conditional instance and layer
//! normalization driven by per-site hyper-MLPs, the low-resolution weight
//! head and a toy encoder-decoder backbone.

mod layers;
mod net;
mod params;
mod tape;
mod tensor;

pub use layers::{
    cin, cln, hyper_mlp, weight_head_forward, CondNormParams, HyperMlp, WeightHead, HYPER_HIDDEN,
    LEAKY_SLOPE,
};
pub use net::{toy_condunet, ToyCondUnet, UnetGraph, UNET_CHANNELS};
pub(crate) use net::velocity_field;
pub(crate) use tape::sigmoid;
pub use params::{ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
