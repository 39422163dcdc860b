//! Multi-resolution latent fusion.

mod fusion;
mod pipeline;
mod tiles;

pub use fusion::{
    fuse_proposals, latent_inpaint_blend, tiled_denoise_step, TileCondition, TileOrder,
    TiledCondition,
};
pub use pipeline::{
    canvas_inpaint_mask, high_res_pass, low_res_pass, mrlf_generate, LowResOutput, MrlfConfig,
    MrlfOutput, StrideSpace, TilingMode, HIGH_RES_SALT, LOW_RES_SALT,
};
pub use tiles::{plan_tiles, TileGrid};
