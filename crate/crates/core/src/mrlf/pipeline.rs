//! Two-pass generation: a base-resolution controlled pass, then tiled
//! denoising on an `s`-times larger canvas where large objects are pinned to
//! the re-noised first pass.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{derive_seed, forward_diffuse, ControlledModel, NoiseField, NoiseStream};
use crate::error::{Error, Result};
use crate::label::{encode_one_hot, large_component_mask, write_rgb_png, ClassTaxonomy, InpaintMask, SemanticMask};
use crate::prompting::{build_prompt, PromptSpec, StyleQualifier};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, LatentCanvas};

use super::fusion::{latent_inpaint_blend, tiled_denoise_step, TileOrder, TiledCondition};
use super::tiles::plan_tiles;

/// Noise-field salts of the first and second pass, applied to the job seed.
pub const LOW_RES_SALT: u64 = 0x10;
pub const HIGH_RES_SALT: u64 = 0x20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrideSpace {
    #[default]
    Latent,
    Image,
}

/// `Untiled` runs the high-resolution pass as one canvas-sized step; it exists
/// as an oracle for the tiled path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TilingMode {
    #[default]
    Tiled,
    Untiled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrlfConfig {
    /// Upscale factor `s` of the second pass.
    pub s: usize,
    pub stride: usize,
    pub stride_space: StrideSpace,
    pub area_threshold: f64,
    pub steps: usize,
    pub seed: u64,
    /// Base latent size; also the tile size of the second pass.
    pub base_latent_h: usize,
    pub base_latent_w: usize,
    pub tiling: TilingMode,
    #[serde(skip)]
    pub tile_order: TileOrder,
    #[serde(skip)]
    pub debug_dir: Option<PathBuf>,
}

impl Default for MrlfConfig {
    fn default() -> Self {
        Self {
            s: 2,
            stride: 16,
            stride_space: StrideSpace::Latent,
            area_threshold: 0.10,
            steps: crate::diffusion::DEFAULT_INFERENCE_STEPS,
            seed: 0,
            base_latent_h: 64,
            base_latent_w: 64,
            tiling: TilingMode::Tiled,
            tile_order: TileOrder::Forward,
            debug_dir: None,
        }
    }
}

impl MrlfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::Config("mrlf.s must be >= 1".into()));
        }
        if self.base_latent_h == 0 || self.base_latent_w == 0 {
            return Err(Error::Config("base latent size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("mrlf.stride must be >= 1".into()));
        }
        if !self.area_threshold.is_finite() {
            return Err(Error::Config("mrlf.area_threshold must be finite".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("mrlf.steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Stride in latent pixels for a VAE with downscale `g`.
    pub fn latent_stride(&self, g: usize) -> usize {
        match self.stride_space {
            StrideSpace::Latent => self.stride,
            StrideSpace::Image => (self.stride / g).max(1),
        }
    }

    /// Image size of the first pass and of the final output.
    pub fn output_size(&self, g: usize) -> (usize, usize) {
        (self.base_latent_h * g, self.base_latent_w * g)
    }

    pub fn canvas_latent_size(&self) -> (usize, usize) {
        (self.s * self.base_latent_h, self.s * self.base_latent_w)
    }

    fn check_model<S: Scalar>(&self, model: &ControlledModel<S>) -> Result<()> {
        self.validate()?;
        if model.schedule.num_steps() != self.steps {
            return Err(Error::Config(format!(
                "mrlf.steps = {} but the model schedule has {} steps",
                self.steps,
                model.schedule.num_steps()
            )));
        }
        if self.latent_stride(model.downscale()) > self.base_latent_h.min(self.base_latent_w) {
            return Err(Error::Config("mrlf.stride exceeds the tile size".into()));
        }
        Ok(())
    }
}

fn resized(mask: &SemanticMask, (h, w): (usize, usize)) -> Result<SemanticMask> {
    if (mask.height(), mask.width()) == (h, w) {
        Ok(mask.clone())
    } else {
        mask.resize_nearest(h, w)
    }
}

fn dump<S: Scalar>(
    dir: Option<&Path>,
    tag: &str,
    t: usize,
    model: &ControlledModel<S>,
    z: &LatentCanvas<S>,
) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let img = model.vae.decode(z)?;
        write_rgb_png(&dir.join(format!("{tag}_{t:03}.png")), &img)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LowResOutput<S> {
    pub image: ImageTensor<S>,
    pub latent: LatentCanvas<S>,
    pub prompt: PromptSpec,
}

/// Full controlled reverse chain at the base latent size.
pub fn low_res_pass<S: Scalar>(
    mask: &SemanticMask,
    taxonomy: &ClassTaxonomy,
    style: Option<&StyleQualifier>,
    model: &ControlledModel<S>,
    config: &MrlfConfig,
) -> Result<LowResOutput<S>> {
    config.check_model(model)?;
    let g = model.downscale();
    let mask = resized(mask, config.output_size(g))?;
    let prompt = build_prompt(&mask.class_set(), taxonomy, style)?;
    let condition = encode_one_hot(&mask, taxonomy)?;
    let field = NoiseField::new(derive_seed(config.seed, LOW_RES_SALT));
    let (h, w, d) = (config.base_latent_h, config.base_latent_w, model.latent_channels());
    let mut z = field.window(NoiseStream::Init, (0, 0), h, w, d);
    for t in (1..=model.schedule.num_steps()).rev() {
        let noise = field.window(NoiseStream::Ancestral(t), (0, 0), h, w, d);
        z = model.step(&z, &condition, t, &prompt, &noise)?;
        dump(config.debug_dir.as_deref(), "low", t - 1, model, &z)?;
    }
    Ok(LowResOutput {
        image: model.vae.decode(&z)?,
        latent: z,
        prompt,
    })
}

/// Large same-class components of `mask`, resized to the canvas latent grid.
pub fn canvas_inpaint_mask(mask: &SemanticMask, config: &MrlfConfig) -> Result<InpaintMask> {
    let (h, w) = config.canvas_latent_size();
    large_component_mask(mask, config.area_threshold, 1)?.resize_nearest(h, w)
}

/// Second pass on the `s`-times canvas, blended with the re-noised first pass
/// inside `inpaint`, then area-downsampled by `s`.
#[allow(clippy::too_many_arguments)]
pub fn high_res_pass<S: Scalar>(
    mask: &SemanticMask,
    taxonomy: &ClassTaxonomy,
    style: Option<&StyleQualifier>,
    first_pass: &ImageTensor<S>,
    inpaint: &InpaintMask,
    model: &ControlledModel<S>,
    config: &MrlfConfig,
) -> Result<ImageTensor<S>> {
    config.check_model(model)?;
    let (g, s, d) = (model.downscale(), config.s, model.latent_channels());
    let (ch, cw) = config.canvas_latent_size();
    if (first_pass.height(), first_pass.width()) != config.output_size(g) {
        return Err(Error::shape("first-pass image does not match the base resolution"));
    }
    if (inpaint.height(), inpaint.width()) != (ch, cw) {
        return Err(Error::shape("inpaint mask does not match the canvas latent size"));
    }
    let canvas_mask = resized(mask, (ch * g, cw * g))?;
    let tiles = match config.tiling {
        TilingMode::Tiled => {
            let grid = plan_tiles(
                ch,
                cw,
                config.base_latent_h,
                config.base_latent_w,
                config.latent_stride(g),
            )?;
            TiledCondition::new(grid, &canvas_mask, taxonomy, style, g)?
        }
        TilingMode::Untiled => TiledCondition::whole_canvas(&canvas_mask, taxonomy, style, g)?,
    };
    let known0 = model.vae.encode(&first_pass.upsample_nearest(s)?)?;
    let field = NoiseField::new(derive_seed(config.seed, HIGH_RES_SALT));
    let mut z = field.window(NoiseStream::Init, (0, 0), ch, cw, d);
    for t in (1..=model.schedule.num_steps()).rev() {
        let z_tilde = tiled_denoise_step(&z, &tiles, t, model, &field, config.tile_order)?;
        let renoise = field.window(NoiseStream::Renoise(t - 1), (0, 0), ch, cw, d);
        let known = forward_diffuse(&known0, t - 1, &renoise, &model.schedule)?;
        z = latent_inpaint_blend(&z_tilde, &known, inpaint)?;
        dump(config.debug_dir.as_deref(), "high", t - 1, model, &z)?;
    }
    model.vae.decode(&z)?.downsample_area(s)
}

#[derive(Debug, Clone)]
pub struct MrlfOutput<S> {
    pub image: ImageTensor<S>,
    pub first_pass: ImageTensor<S>,
    pub prompt: PromptSpec,
    pub inpaint: Option<InpaintMask>,
}

/// Both passes. With `s = 1` the first pass is the result.
pub fn mrlf_generate<S: Scalar>(
    mask: &SemanticMask,
    taxonomy: &ClassTaxonomy,
    style: Option<&StyleQualifier>,
    model: &ControlledModel<S>,
    config: &MrlfConfig,
) -> Result<MrlfOutput<S>> {
    let low = low_res_pass(mask, taxonomy, style, model, config)?;
    if config.s == 1 {
        return Ok(MrlfOutput {
            image: low.image.clone(),
            first_pass: low.image,
            prompt: low.prompt,
            inpaint: None,
        });
    }
    let inpaint = canvas_inpaint_mask(mask, config)?;
    let image = high_res_pass(mask, taxonomy, style, &low.image, &inpaint, model, config)?;
    Ok(MrlfOutput {
        image,
        first_pass: low.image,
        prompt: low.prompt,
        inpaint: Some(inpaint),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::toy::{toy_backend, TargetField};
    use crate::diffusion::{NoiseSchedule, SamplerConfig};
    use crate::prompting::StyleCatalog;

    fn small_config() -> MrlfConfig {
        MrlfConfig {
            stride: 2,
            base_latent_h: 6,
            base_latent_w: 6,
            steps: 10,
            seed: 5,
            ..MrlfConfig::default()
        }
    }

    fn model(tax: &ClassTaxonomy, g: usize) -> ControlledModel<f64> {
        let mut target = TargetField::palette(tax);
        target.unconditional = vec![0.1, -0.2, 0.3];
        toy_backend(&target, g, NoiseSchedule::linear(10, Default::default()).unwrap())
            .unwrap()
            .into_model(SamplerConfig::default())
    }

    fn mask() -> SemanticMask {
        SemanticMask::from_fn(12, 12, |y, x| match (y / 4, x / 4) {
            (0, _) => 10,
            (1, 1) => 13,
            (2, 2) => 255,
            _ => 0,
        })
        .unwrap()
    }

    #[test]
    fn generated_image_follows_mask() {
        let tax = ClassTaxonomy::driving();
        let m = model(&tax, 2);
        let cfg = small_config();
        let catalog = StyleCatalog::adverse_weather();
        let style = catalog.get("rainy");
        let out = mrlf_generate(&mask(), &tax, style, &m, &cfg).unwrap();
        let mut target = TargetField::palette(&tax);
        target.unconditional = vec![0.1, -0.2, 0.3];
        let mk = mask();
        for y in 0..12 {
            for x in 0..12 {
                let class = (!mk.is_ignore(y, x)).then(|| mk.get(y, x) as usize);
                let expected = target.intensity(class, Some("rainy"));
                for c in 0..3 {
                    assert!((out.image.get(y, x, c) - expected[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn scale_one_returns_first_pass() {
        let tax = ClassTaxonomy::driving();
        let m = model(&tax, 2);
        let cfg = MrlfConfig { s: 1, ..small_config() };
        let out = mrlf_generate(&mask(), &tax, None, &m, &cfg).unwrap();
        let low = low_res_pass(&mask(), &tax, None, &m, &cfg).unwrap();
        assert_eq!(out.image, low.image);
    }

    #[test]
    fn all_ignore_without_style_fails() {
        let tax = ClassTaxonomy::driving();
        let m = model(&tax, 2);
        let empty = SemanticMask::filled(12, 12, 255).unwrap();
        assert!(low_res_pass(&empty, &tax, None, &m, &small_config()).is_err());
    }

    #[test]
    fn steps_must_match_schedule() {
        let tax = ClassTaxonomy::driving();
        let m = model(&tax, 2);
        let cfg = MrlfConfig { steps: 50, ..small_config() };
        assert!(mrlf_generate(&mask(), &tax, None, &m, &cfg).is_err());
    }

    #[test]
    fn image_stride_space_divides_by_downscale() {
        let cfg = MrlfConfig { stride: 16, stride_space: StrideSpace::Image, ..MrlfConfig::default() };
        assert_eq!(cfg.latent_stride(8), 2);
        assert_eq!(MrlfConfig::default().latent_stride(8), 16);
    }
}
