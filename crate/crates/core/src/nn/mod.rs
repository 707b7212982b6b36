//! Minimal neural-network toolkit on candle tensors: parameters, layers,
//! optimizer, checkpoints and FLOP accounting.

mod ckpt;
pub mod flops;
pub mod fused;
mod layers;
mod optim;
mod params;

pub use ckpt::{write_atomic, Checkpoint, CKPT_VERSION};
pub use layers::{
    cross_entropy, log_softmax, sincos_2d, sincos_tensor, soft_cross_entropy, softmax, Attention, Block, LayerNorm,
    Linear, Mlp, Stem, StemKind,
};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::{Init, NamedTensor, ParamStore};

pub use candle_core::{DType, Device, Tensor, Var};
