//! Small neural-network toolkit on top of `candle` tensors: layers with
//! deterministic initialization, SPADE normalization, losses, Adam and checkpoints.

pub mod convert;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use layers::{
    instance_norm, log_softmax_channels, max_pool2x2, relu, selu, sigmoid, softmax_channels, Conv2d, ConvOpts, Init, InputNorm, Spade,
    UpConv2x,
};
pub use loss::{cross_entropy, l1, ClassWeighting};
pub use optim::{Adam, ReduceOnPlateau};
pub use params::{CheckpointManifest, ParamStore};
