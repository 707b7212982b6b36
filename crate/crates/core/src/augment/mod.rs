//! Token-space, embedding-space and pixel-space augmentations.

mod color;
mod corrupt;
mod pipeline;
mod pixel;
pub mod spatial;
mod token;

pub use color::{color_adapt, emb_noise, ChannelStats, DEFAULT_EPS};
pub use corrupt::{blur_sigma, corrupt, gaussian_blur, CorruptionKind, BLUR_SIGMA, NOISE_STD};
pub use pipeline::{
    compose, compose_mtm, entry_std, mtm_specs, seit_plus_specs, seit_specs, AugBatch, AugOp, AugSpec, Pipeline,
    Stage, TokenAdapter,
};
pub use pixel::{pixel_aug, PixelOp, SampledAug};
pub use token::{
    crop_warp, cutmix_with_box, mix_labels, sample_grid_crop, token_cutmix, token_eda_swap, token_rrc, OneHotGrid,
    Resample,
};
