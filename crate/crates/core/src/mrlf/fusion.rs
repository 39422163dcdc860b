//! Controlled tiled denoising with mean fusion of overlaps, and the latent
//! inpainting blend.

use rayon::prelude::*;

use crate::diffusion::{ControlledModel, NoiseField, NoiseStream};
use crate::error::{Error, Result};
use crate::label::{encode_one_hot, ClassTaxonomy, InpaintMask, OneHotCondition, SemanticMask};
use crate::prompting::{tile_prompt, PromptSpec, StyleQualifier};
use crate::scalar::Scalar;
use crate::tensor::LatentCanvas;

use super::tiles::{plan_tiles, TileGrid};

/// Order in which tile proposals are computed. Fusion always accumulates in
/// canonical (row-major) order, so both give bitwise-equal results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TileOrder {
    #[default]
    Forward,
    Reversed,
}

#[derive(Debug, Clone)]
pub struct TileCondition {
    pub origin: (usize, usize),
    pub condition: OneHotCondition,
    pub prompt: PromptSpec,
}

/// Per-tile condition crops and prompts for one canvas, reused at every step.
#[derive(Debug, Clone)]
pub struct TiledCondition {
    grid: TileGrid,
    downscale: usize,
    tiles: Vec<TileCondition>,
}

impl TiledCondition {
    /// `mask` is at canvas image resolution (`downscale` × the latent grid).
    pub fn new(
        grid: TileGrid,
        mask: &SemanticMask,
        taxonomy: &ClassTaxonomy,
        style: Option<&StyleQualifier>,
        downscale: usize,
    ) -> Result<Self> {
        let g = downscale;
        if mask.height() != grid.canvas_h * g || mask.width() != grid.canvas_w * g {
            return Err(Error::shape(format!(
                "condition {}x{} does not match canvas {}x{} at downscale {g}",
                mask.height(),
                mask.width(),
                grid.canvas_h,
                grid.canvas_w
            )));
        }
        let one_hot = encode_one_hot(mask, taxonomy)?;
        let (th, tw) = (grid.tile_h * g, grid.tile_w * g);
        let tiles = grid
            .origins
            .iter()
            .map(|&(r, c)| {
                let classes = mask.crop(r * g, c * g, th, tw)?.class_set();
                Ok(TileCondition {
                    origin: (r, c),
                    condition: one_hot.crop(r * g, c * g, th, tw)?,
                    prompt: tile_prompt(&classes, taxonomy, style)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            downscale,
            tiles,
        })
    }

    /// One tile spanning the whole canvas.
    pub fn whole_canvas(
        mask: &SemanticMask,
        taxonomy: &ClassTaxonomy,
        style: Option<&StyleQualifier>,
        downscale: usize,
    ) -> Result<Self> {
        if downscale == 0 || mask.height() % downscale != 0 || mask.width() % downscale != 0 {
            return Err(Error::shape(format!(
                "mask {}x{} not divisible by downscale {downscale}",
                mask.height(),
                mask.width()
            )));
        }
        let (h, w) = (mask.height() / downscale, mask.width() / downscale);
        Self::new(plan_tiles(h, w, h, w, 1)?, mask, taxonomy, style, downscale)
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn tiles(&self) -> &[TileCondition] {
        &self.tiles
    }

    pub fn downscale(&self) -> usize {
        self.downscale
    }
}

/// Averages overlapping proposals. Each pixel accumulates deviations from its
/// first proposal in tile order, so equal proposals fuse to that exact value.
pub fn fuse_proposals<S: Scalar>(
    grid: &TileGrid,
    proposals: &[LatentCanvas<S>],
) -> Result<LatentCanvas<S>> {
    if proposals.len() != grid.len() || proposals.is_empty() {
        return Err(Error::shape(format!(
            "{} proposals for {} tiles",
            proposals.len(),
            grid.len()
        )));
    }
    let d = proposals[0].channels();
    let mut base = LatentCanvas::zeros(grid.canvas_h, grid.canvas_w, d);
    let mut dev = LatentCanvas::<S>::zeros(grid.canvas_h, grid.canvas_w, d);
    let mut seen = vec![0u32; grid.canvas_h * grid.canvas_w];
    for (&(r, c), p) in grid.origins.iter().zip(proposals) {
        if p.shape() != (grid.tile_h, grid.tile_w, d) {
            return Err(Error::shape("tile proposal has the wrong shape"));
        }
        for y in 0..grid.tile_h {
            for x in 0..grid.tile_w {
                let (cy, cx) = (r + y, c + x);
                let k = &mut seen[cy * grid.canvas_w + cx];
                let v = p.pixel(y, x);
                if *k == 0 {
                    base.pixel_mut(cy, cx).copy_from_slice(v);
                } else {
                    let b = base.pixel(cy, cx).to_vec();
                    for ((acc, &v), b) in dev.pixel_mut(cy, cx).iter_mut().zip(v).zip(b) {
                        *acc += v - b;
                    }
                }
                *k += 1;
            }
        }
    }
    for y in 0..grid.canvas_h {
        for x in 0..grid.canvas_w {
            let k = S::of(seen[y * grid.canvas_w + x] as f64);
            let dv = dev.pixel(y, x).to_vec();
            for (b, dv) in base.pixel_mut(y, x).iter_mut().zip(dv) {
                *b += dv / k;
            }
        }
    }
    Ok(base)
}

/// One reverse step over the canvas: each tile is denoised with its own
/// condition crop, prompt and window of the shared noise field, then overlaps
/// are averaged.
pub fn tiled_denoise_step<S: Scalar>(
    canvas_t: &LatentCanvas<S>,
    tiles: &TiledCondition,
    t: usize,
    model: &ControlledModel<S>,
    field: &NoiseField,
    order: TileOrder,
) -> Result<LatentCanvas<S>> {
    let grid = &tiles.grid;
    if canvas_t.height() != grid.canvas_h || canvas_t.width() != grid.canvas_w {
        return Err(Error::shape(format!(
            "canvas {}x{} does not match tile grid {}x{}",
            canvas_t.height(),
            canvas_t.width(),
            grid.canvas_h,
            grid.canvas_w
        )));
    }
    if t == 0 {
        return Err(Error::arg("cannot denoise below timestep 0"));
    }
    let d = canvas_t.channels();
    let mut indices: Vec<usize> = (0..tiles.tiles.len()).collect();
    if order == TileOrder::Reversed {
        indices.reverse();
    }
    let run = |i: usize| -> Result<(usize, LatentCanvas<S>)> {
        let tile = &tiles.tiles[i];
        let (r, c) = tile.origin;
        let z = canvas_t.crop(r, c, grid.tile_h, grid.tile_w)?;
        let noise = field.window(NoiseStream::Ancestral(t), (r, c), grid.tile_h, grid.tile_w, d);
        Ok((i, model.step(&z, &tile.condition, t, &tile.prompt, &noise)?))
    };
    let computed: Vec<(usize, LatentCanvas<S>)> = if model.denoiser.supports_concurrency() {
        indices.par_iter().map(|&i| run(i)).collect::<Result<_>>()?
    } else {
        indices.iter().map(|&i| run(i)).collect::<Result<_>>()?
    };
    let mut slots: Vec<Option<LatentCanvas<S>>> = vec![None; computed.len()];
    for (i, p) in computed {
        slots[i] = Some(p);
    }
    let proposals: Vec<LatentCanvas<S>> = slots.into_iter().map(|p| p.expect("every tile ran")).collect();
    fuse_proposals(grid, &proposals)
}

/// `Z = (1 − M) ⊗ Z̃ + M ⊗ L` with `M` broadcast over channels.
pub fn latent_inpaint_blend<S: Scalar>(
    z_tilde: &LatentCanvas<S>,
    known: &LatentCanvas<S>,
    mask: &InpaintMask,
) -> Result<LatentCanvas<S>> {
    z_tilde.ensure_same_shape(known, "latent_inpaint_blend")?;
    if mask.height() != z_tilde.height() || mask.width() != z_tilde.width() {
        return Err(Error::shape(format!(
            "inpaint mask {}x{} vs latent {}x{}",
            mask.height(),
            mask.width(),
            z_tilde.height(),
            z_tilde.width()
        )));
    }
    let d = z_tilde.channels();
    let data = z_tilde
        .data()
        .iter()
        .zip(known.data())
        .enumerate()
        .map(|(i, (&z, &l))| {
            let m = S::of(mask.data()[i / d] as f64);
            (S::one() - m) * z + m * l
        })
        .collect();
    let (h, w, _) = z_tilde.shape();
    LatentCanvas::from_vec(h, w, d, data)
}
