//! Pixel-local toy backend with closed-form behavior, used as a test oracle.
//!
//! The denoiser assumes the data at every latent pixel is a point mass at
//! `x̂0 = prior + style_shift + control_feature(pixel)` and predicts
//! `ε = (x_t - sqrt(ᾱ_t) x̂0) / sqrt(1 - ᾱ_t)`. Any DDIM-family chain then lands
//! exactly on `x̂0` at level 0. The control adapter averages per-class residual
//! vectors over each latent pixel's `g × g` block of condition pixels, and the
//! VAE is an affine `[0, 1] ↔ [-1, 1]` map combined with block averaging
//! (encode) and block replication (decode). Every output pixel depends only on
//! its own latent pixel, so tiled and untiled sampling agree exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassTaxonomy, OneHotCondition};
use crate::prompting::PromptSpec;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, LatentCanvas};

use super::backend::{
    ControlAdapter, ControlFeatures, ControlledModel, Denoiser, SamplerConfig, TrainableControl,
    TrainableDenoiser, Vae,
};
use super::registry::{
    assemble_swapped, CheckpointDescriptor, InferenceModelDescriptor, ModelKind, ModelRegistry,
    Provenance, PRIOR_DENOISER, SOURCE_CONTROL, SOURCE_DENOISER,
};
use super::schedule::NoiseSchedule;

pub const TOY_BACKEND: &str = "toy";
pub const TOY_CHANNELS: usize = 3;
pub const DEFAULT_DOWNSCALE: usize = 8;

#[inline]
fn to_latent<S: Scalar>(intensity: S) -> S {
    S::of(2.0) * intensity - S::one()
}

#[inline]
fn to_intensity<S: Scalar>(latent: S) -> S {
    (latent + S::one()) / S::of(2.0)
}

fn cast_vec<S: Scalar, T: Scalar>(v: &[S]) -> Vec<T> {
    v.iter().map(|x| T::of(x.as_f64())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiserWeights {
    pub prior: Vec<f64>,
    #[serde(default)]
    pub style_shifts: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyControlWeights {
    pub downscale: usize,
    pub residuals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<S> {
    id: String,
    prior: Vec<S>,
    style_shifts: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> ToyDenoiser<S> {
    pub fn new(id: &str, prior: Vec<S>, style_shifts: BTreeMap<String, Vec<S>>) -> Result<Self> {
        if prior.is_empty() {
            return Err(Error::arg("toy denoiser needs at least one channel"));
        }
        if let Some((token, _)) = style_shifts.iter().find(|(_, v)| v.len() != prior.len()) {
            return Err(Error::shape(format!(
                "style shift `{token}` has wrong channel count"
            )));
        }
        Ok(Self {
            id: id.to_string(),
            prior,
            style_shifts,
        })
    }

    pub fn prior(&self) -> &[S] {
        &self.prior
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.id = id.to_string();
        self
    }

    /// Clean latent the denoiser targets for `prompt` before control is added.
    pub fn clean_estimate(&self, prompt: &PromptSpec) -> Vec<S> {
        let shift = prompt.style_token().and_then(|t| self.style_shifts.get(t));
        self.prior
            .iter()
            .enumerate()
            .map(|(c, &p)| p + shift.map_or(S::zero(), |s| s[c]))
            .collect()
    }

    pub fn to_weights(&self) -> ToyDenoiserWeights {
        ToyDenoiserWeights {
            prior: cast_vec(&self.prior),
            style_shifts: self
                .style_shifts
                .iter()
                .map(|(k, v)| (k.clone(), cast_vec(v)))
                .collect(),
        }
    }

    pub fn from_weights(id: &str, w: &ToyDenoiserWeights) -> Result<Self> {
        Self::new(
            id,
            cast_vec(&w.prior),
            w.style_shifts
                .iter()
                .map(|(k, v)| (k.clone(), cast_vec(v)))
                .collect(),
        )
    }

    fn check_control(&self, latent: &LatentCanvas<S>, control: &ControlFeatures<S>) -> Result<()> {
        match control.residuals.as_slice() {
            [r] if r.same_shape(latent) => Ok(()),
            _ => Err(Error::shape(
                "toy denoiser expects exactly one residual shaped like the latent",
            )),
        }
    }

    fn noise_scale(&self, t: usize, schedule: &NoiseSchedule<S>) -> Result<(S, S)> {
        if t == 0 {
            return Err(Error::arg("noise prediction is undefined at timestep 0"));
        }
        schedule.check_level(t)?;
        let a = schedule.alpha_bar(t);
        Ok((a.sqrt(), (S::one() - a).sqrt()))
    }
}

impl<S: Scalar> Denoiser<S> for ToyDenoiser<S> {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn predict_noise(
        &self,
        latent: &LatentCanvas<S>,
        t: usize,
        schedule: &NoiseSchedule<S>,
        prompt: &PromptSpec,
        control: Option<&ControlFeatures<S>>,
    ) -> Result<LatentCanvas<S>> {
        if latent.channels() != self.prior.len() {
            return Err(Error::shape(format!(
                "latent has {} channels, toy denoiser {}",
                latent.channels(),
                self.prior.len()
            )));
        }
        if let Some(f) = control {
            self.check_control(latent, f)?;
        }
        let (signal, sigma) = self.noise_scale(t, schedule)?;
        let base = self.clean_estimate(prompt);
        let d = base.len();
        let residual = control.map(|f| f.residuals[0].data());
        let data = latent
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let x0 = base[i % d] + residual.map_or(S::zero(), |r| r[i]);
                (x - signal * x0) / sigma
            })
            .collect();
        let (h, w, c) = latent.shape();
        LatentCanvas::from_vec(h, w, c, data)
    }
}

impl<S: Scalar> TrainableDenoiser<S> for ToyDenoiser<S> {
    fn parameters(&self) -> Vec<S> {
        self.prior.clone()
    }

    fn set_parameters(&mut self, params: &[S]) -> Result<()> {
        if params.len() != self.prior.len() {
            return Err(Error::shape("toy denoiser parameter count"));
        }
        self.prior.copy_from_slice(params);
        Ok(())
    }

    fn parameter_vjp(
        &self,
        latent: &LatentCanvas<S>,
        t: usize,
        schedule: &NoiseSchedule<S>,
        _prompt: &PromptSpec,
        _control: Option<&ControlFeatures<S>>,
        upstream: &LatentCanvas<S>,
    ) -> Result<Vec<S>> {
        latent.ensure_same_shape(upstream, "toy denoiser vjp")?;
        let (signal, sigma) = self.noise_scale(t, schedule)?;
        let d = self.prior.len();
        let mut grad = vec![S::zero(); d];
        for (i, &u) in upstream.data().iter().enumerate() {
            grad[i % d] += u;
        }
        let k = -signal / sigma;
        Ok(grad.into_iter().map(|g| g * k).collect())
    }

    fn control_vjp(
        &self,
        latent: &LatentCanvas<S>,
        t: usize,
        schedule: &NoiseSchedule<S>,
        _prompt: &PromptSpec,
        control: &ControlFeatures<S>,
        upstream: &LatentCanvas<S>,
    ) -> Result<ControlFeatures<S>> {
        self.check_control(latent, control)?;
        latent.ensure_same_shape(upstream, "toy control vjp")?;
        let (signal, sigma) = self.noise_scale(t, schedule)?;
        let k = -signal / sigma;
        Ok(ControlFeatures {
            residuals: vec![upstream.map(|u| u * k)],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyControl<S> {
    id: String,
    downscale: usize,
    residuals: Vec<Vec<S>>,
}

impl<S: Scalar> ToyControl<S> {
    pub fn new(id: &str, downscale: usize, residuals: Vec<Vec<S>>) -> Result<Self> {
        if downscale == 0 {
            return Err(Error::arg("downscale must be >= 1"));
        }
        let d = residuals.first().map(Vec::len).unwrap_or(0);
        if d == 0 || residuals.iter().any(|r| r.len() != d) {
            return Err(Error::shape("toy control residuals must share a nonzero channel count"));
        }
        Ok(Self {
            id: id.to_string(),
            downscale,
            residuals,
        })
    }

    pub fn residuals(&self) -> &[Vec<S>] {
        &self.residuals
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.id = id.to_string();
        self
    }

    pub fn to_weights(&self) -> ToyControlWeights {
        ToyControlWeights {
            downscale: self.downscale,
            residuals: self.residuals.iter().map(|r| cast_vec(r)).collect(),
        }
    }

    pub fn from_weights(id: &str, w: &ToyControlWeights) -> Result<Self> {
        Self::new(id, w.downscale, w.residuals.iter().map(|r| cast_vec(r)).collect())
    }

    fn check(&self, condition: &OneHotCondition, latent: &LatentCanvas<S>) -> Result<()> {
        let g = self.downscale;
        if condition.height() != latent.height() * g || condition.width() != latent.width() * g {
            return Err(Error::shape(format!(
                "condition {}x{} does not map to latent {}x{} at downscale {g}",
                condition.height(),
                condition.width(),
                latent.height(),
                latent.width()
            )));
        }
        if condition.channels() != self.residuals.len() {
            return Err(Error::shape(format!(
                "condition has {} classes, adapter {}",
                condition.channels(),
                self.residuals.len()
            )));
        }
        if latent.channels() != self.residuals[0].len() {
            return Err(Error::shape("latent channels differ from adapter channels"));
        }
        Ok(())
    }

    /// Calls `f(latent_y, latent_x, class)` once per labeled condition pixel.
    fn for_each_labeled(
        &self,
        condition: &OneHotCondition,
        latent: &LatentCanvas<S>,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let g = self.downscale;
        for ly in 0..latent.height() {
            for lx in 0..latent.width() {
                for y in ly * g..(ly + 1) * g {
                    for x in lx * g..(lx + 1) * g {
                        if let Some(c) = condition.hot_channel(y, x) {
                            f(ly, lx, c as usize);
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> ControlAdapter<S> for ToyControl<S> {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn downscale(&self) -> usize {
        self.downscale
    }

    fn features(
        &self,
        condition: &OneHotCondition,
        _t: usize,
        latent: &LatentCanvas<S>,
    ) -> Result<ControlFeatures<S>> {
        self.check(condition, latent)?;
        let (h, w, d) = latent.shape();
        let mut out = LatentCanvas::zeros(h, w, d);
        self.for_each_labeled(condition, latent, |ly, lx, c| {
            let px = out.pixel_mut(ly, lx);
            for (v, &r) in px.iter_mut().zip(&self.residuals[c]) {
                *v += r;
            }
        });
        let area = S::of((self.downscale * self.downscale) as f64);
        Ok(ControlFeatures {
            residuals: vec![out.map(|v| v / area)],
        })
    }
}

impl<S: Scalar> TrainableControl<S> for ToyControl<S> {
    fn parameters(&self) -> Vec<S> {
        self.residuals.iter().flatten().copied().collect()
    }

    fn set_parameters(&mut self, params: &[S]) -> Result<()> {
        let d = self.residuals[0].len();
        if params.len() != d * self.residuals.len() {
            return Err(Error::shape("toy control parameter count"));
        }
        for (r, chunk) in self.residuals.iter_mut().zip(params.chunks(d)) {
            r.copy_from_slice(chunk);
        }
        Ok(())
    }

    fn parameter_vjp(
        &self,
        condition: &OneHotCondition,
        _t: usize,
        latent: &LatentCanvas<S>,
        upstream: &ControlFeatures<S>,
    ) -> Result<Vec<S>> {
        self.check(condition, latent)?;
        let up = match upstream.residuals.as_slice() {
            [r] if r.same_shape(latent) => r,
            _ => return Err(Error::shape("upstream gradient must match the feature shape")),
        };
        let d = latent.channels();
        let area = S::of((self.downscale * self.downscale) as f64);
        let mut grad = vec![S::zero(); self.residuals.len() * d];
        self.for_each_labeled(condition, latent, |ly, lx, c| {
            for (k, &u) in up.pixel(ly, lx).iter().enumerate() {
                grad[c * d + k] += u / area;
            }
        });
        Ok(grad)
    }
}

/// Affine VAE: `latent = 2·intensity − 1`, block-mean encode, replicate decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyVae {
    downscale: usize,
    channels: usize,
}

impl ToyVae {
    pub fn new(downscale: usize) -> Result<Self> {
        if downscale == 0 {
            return Err(Error::arg("downscale must be >= 1"));
        }
        Ok(Self {
            downscale,
            channels: TOY_CHANNELS,
        })
    }
}

impl<S: Scalar> Vae<S> for ToyVae {
    fn downscale(&self) -> usize {
        self.downscale
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, image: &ImageTensor<S>) -> Result<LatentCanvas<S>> {
        if image.channels() != self.channels {
            return Err(Error::shape(format!(
                "toy VAE expects {} image channels, got {}",
                self.channels,
                image.channels()
            )));
        }
        Ok(image.downsample_area(self.downscale)?.map(to_latent))
    }

    fn decode(&self, latent: &LatentCanvas<S>) -> Result<ImageTensor<S>> {
        if latent.channels() != self.channels {
            return Err(Error::shape(format!(
                "toy VAE expects {} latent channels, got {}",
                self.channels,
                latent.channels()
            )));
        }
        latent.map(to_intensity).upsample_nearest(self.downscale)
    }
}

/// Per-class clean latents (plus an unconditional value for ignore pixels)
/// that the toy sampler reproduces.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetField<S> {
    pub unconditional: Vec<S>,
    pub class_values: Vec<Vec<S>>,
    pub style_shifts: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> TargetField<S> {
    pub fn constant(value: S, num_classes: usize) -> Self {
        Self {
            unconditional: vec![value; TOY_CHANNELS],
            class_values: vec![vec![value; TOY_CHANNELS]; num_classes],
            style_shifts: BTreeMap::new(),
        }
    }

    /// Class `c` decodes to gray intensity `c / 255`; ignore decodes to 0.5.
    pub fn class_id_intensity(num_classes: usize) -> Self {
        Self {
            unconditional: vec![S::zero(); TOY_CHANNELS],
            class_values: (0..num_classes)
                .map(|c| vec![to_latent(S::of(c as f64 / 255.0)); TOY_CHANNELS])
                .collect(),
            style_shifts: BTreeMap::new(),
        }
    }

    /// Class `c` decodes to its palette color.
    pub fn palette(taxonomy: &ClassTaxonomy) -> Self {
        Self {
            unconditional: vec![S::zero(); TOY_CHANNELS],
            class_values: taxonomy
                .classes()
                .iter()
                .map(|c| {
                    taxonomy
                        .color(c.id)
                        .iter()
                        .map(|&v| to_latent(S::of(v as f64 / 255.0)))
                        .collect()
                })
                .collect(),
            style_shifts: default_style_shifts(),
        }
    }

    /// Expected decoded intensity for a pixel of `class` (`None` = ignore).
    pub fn intensity(&self, class: Option<usize>, style: Option<&str>) -> Vec<S> {
        let base = class.map_or(&self.unconditional, |c| &self.class_values[c]);
        let shift = style.and_then(|s| self.style_shifts.get(s));
        base.iter()
            .enumerate()
            .map(|(k, &v)| to_intensity(v + shift.map_or(S::zero(), |s| s[k])))
            .collect()
    }
}

/// Latent-space offsets for the adverse-weather catalog.
pub fn default_style_shifts<S: Scalar>() -> BTreeMap<String, Vec<S>> {
    [
        ("foggy", [0.5, 0.5, 0.55]),
        ("snowy", [0.6, 0.6, 0.7]),
        ("rainy", [-0.2, -0.2, -0.1]),
        ("overcast", [-0.1, -0.1, -0.1]),
        ("night", [-0.8, -0.8, -0.5]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.iter().map(|&x| S::of(x)).collect()))
    .collect()
}

pub struct ToyBackend<S> {
    pub denoiser: ToyDenoiser<S>,
    pub control: ToyControl<S>,
    pub vae: ToyVae,
    pub schedule: NoiseSchedule<S>,
}

/// Toy denoiser/adapter pair whose sampler converges to `target`.
pub fn toy_backend<S: Scalar>(
    target: &TargetField<S>,
    downscale: usize,
    schedule: NoiseSchedule<S>,
) -> Result<ToyBackend<S>> {
    let residuals = target
        .class_values
        .iter()
        .map(|v| {
            v.iter()
                .zip(&target.unconditional)
                .map(|(&a, &b)| a - b)
                .collect()
        })
        .collect();
    Ok(ToyBackend {
        denoiser: ToyDenoiser::new(
            TOY_BACKEND,
            target.unconditional.clone(),
            target.style_shifts.clone(),
        )?,
        control: ToyControl::new(TOY_BACKEND, downscale, residuals)?,
        vae: ToyVae::new(downscale)?,
        schedule,
    })
}

impl<S: Scalar> ToyBackend<S> {
    pub fn into_model(self, sampler: SamplerConfig) -> ControlledModel<S> {
        let descriptor = InferenceModelDescriptor {
            backend: TOY_BACKEND.to_string(),
            base: self.denoiser.model_id().to_string(),
            control: self.control.model_id().to_string(),
            control_trained_against: self.denoiser.model_id().to_string(),
            swapped: false,
            forced_override: false,
            lineage: Vec::new(),
        };
        ControlledModel {
            descriptor,
            denoiser: Box::new(self.denoiser),
            control: Box::new(self.control),
            vae: Box::new(self.vae),
            schedule: self.schedule,
            sampler,
        }
    }
}

pub fn register_toy_denoiser<S: Scalar>(
    registry: &mut ModelRegistry,
    id: &str,
    denoiser: &ToyDenoiser<S>,
    base_pairing: Option<&str>,
    provenance: Provenance,
) -> Result<()> {
    registry.register(
        CheckpointDescriptor {
            id: id.to_string(),
            kind: ModelKind::Denoiser,
            backend: TOY_BACKEND.to_string(),
            base_pairing: base_pairing.map(str::to_string),
            provenance,
        },
        serde_json::to_vec(&denoiser.to_weights())?,
    )
}

pub fn register_toy_control<S: Scalar>(
    registry: &mut ModelRegistry,
    id: &str,
    control: &ToyControl<S>,
    base_pairing: &str,
    provenance: Provenance,
) -> Result<()> {
    registry.register(
        CheckpointDescriptor {
            id: id.to_string(),
            kind: ModelKind::ControlAdapter,
            backend: TOY_BACKEND.to_string(),
            base_pairing: Some(base_pairing.to_string()),
            provenance,
        },
        serde_json::to_vec(&control.to_weights())?,
    )
}

fn ensure_toy(registry: &ModelRegistry, id: &str, kind: ModelKind) -> Result<()> {
    let d = registry.descriptor(id)?;
    if d.backend != TOY_BACKEND || d.kind != kind {
        return Err(Error::Registry(format!(
            "checkpoint `{id}` is a {} {:?}, expected a toy {kind:?}",
            d.backend, d.kind
        )));
    }
    Ok(())
}

pub fn load_toy_denoiser<S: Scalar>(registry: &ModelRegistry, id: &str) -> Result<ToyDenoiser<S>> {
    ensure_toy(registry, id, ModelKind::Denoiser)?;
    let w: ToyDenoiserWeights = serde_json::from_slice(registry.weights(id)?)?;
    ToyDenoiser::from_weights(id, &w)
}

pub fn load_toy_control<S: Scalar>(registry: &ModelRegistry, id: &str) -> Result<ToyControl<S>> {
    ensure_toy(registry, id, ModelKind::ControlAdapter)?;
    let w: ToyControlWeights = serde_json::from_slice(registry.weights(id)?)?;
    ToyControl::from_weights(id, &w)
}

/// Registers only a toy `U_P` (palette prior), the starting point of training.
pub fn bootstrap_toy_prior(
    registry: &mut ModelRegistry,
    taxonomy: &ClassTaxonomy,
    downscale: usize,
) -> Result<()> {
    let backend = toy_backend::<f64>(&TargetField::palette(taxonomy), downscale, NoiseSchedule::default())?;
    register_toy_denoiser(
        registry,
        PRIOR_DENOISER,
        &backend.denoiser,
        None,
        Provenance::stage("pretrained"),
    )
}

/// Registers a ready-to-use toy `U_P`, `U_S` and `control_S` whose swapped
/// model paints each class in its palette color.
pub fn bootstrap_toy_registry(
    registry: &mut ModelRegistry,
    taxonomy: &ClassTaxonomy,
    downscale: usize,
) -> Result<()> {
    bootstrap_toy_prior(registry, taxonomy, downscale)?;
    let backend = toy_backend::<f64>(&TargetField::palette(taxonomy), downscale, NoiseSchedule::default())?;
    register_toy_denoiser(
        registry,
        SOURCE_DENOISER,
        &backend.denoiser,
        Some(PRIOR_DENOISER),
        Provenance {
            parent: Some(PRIOR_DENOISER.to_string()),
            ..Provenance::stage("bootstrap")
        },
    )?;
    register_toy_control(
        registry,
        SOURCE_CONTROL,
        &backend.control,
        SOURCE_DENOISER,
        Provenance {
            parent: Some(SOURCE_DENOISER.to_string()),
            ..Provenance::stage("bootstrap")
        },
    )
}

/// Style-swapped toy inference model: `U_P` at runtime with `control_S`.
pub fn load_swapped_toy_model<S: Scalar>(
    registry: &ModelRegistry,
    schedule: NoiseSchedule<S>,
    sampler: SamplerConfig,
) -> Result<ControlledModel<S>> {
    let descriptor = assemble_swapped(registry)?;
    let denoiser = load_toy_denoiser::<S>(registry, &descriptor.base)?;
    let control = load_toy_control::<S>(registry, &descriptor.control)?;
    let vae = ToyVae::new(control.downscale)?;
    Ok(ControlledModel {
        descriptor,
        denoiser: Box::new(denoiser),
        control: Box::new(control),
        vae: Box::new(vae),
        schedule,
        sampler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::backend::denoise_step;
    use crate::diffusion::noise::{NoiseField, NoiseStream};
    use crate::label::{encode_one_hot, SemanticMask};
    use crate::prompting::build_prompt;

    fn run_chain<S: Scalar>(
        model: &ControlledModel<S>,
        mask: &SemanticMask,
        taxonomy: &ClassTaxonomy,
        seed: u64,
    ) -> LatentCanvas<S> {
        let g = model.downscale();
        let cond = encode_one_hot(mask, taxonomy).unwrap();
        let prompt = build_prompt(&mask.class_set(), taxonomy, None).unwrap();
        let (h, w) = (mask.height() / g, mask.width() / g);
        let field = NoiseField::new(seed);
        let mut z = field.window(NoiseStream::Init, (0, 0), h, w, TOY_CHANNELS);
        for t in (1..=model.schedule.num_steps()).rev() {
            let noise = field.window(NoiseStream::Ancestral(t), (0, 0), h, w, TOY_CHANNELS);
            z = model.step(&z, &cond, t, &prompt, &noise).unwrap();
        }
        z
    }

    #[test]
    fn constant_zero_target() {
        let tax = ClassTaxonomy::numbered(3).unwrap();
        let model = toy_backend::<f64>(&TargetField::constant(0.0, 3), 2, NoiseSchedule::default())
            .unwrap()
            .into_model(SamplerConfig::default());
        let mask = SemanticMask::from_fn(8, 8, |y, x| ((y + x) % 3) as u8).unwrap();
        let z = run_chain(&model, &mask, &tax, 1);
        assert!(z.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn class_intensity_target_decodes_to_label_map() {
        let tax = ClassTaxonomy::numbered(19).unwrap();
        let g = 4;
        let model = toy_backend::<f64>(&TargetField::class_id_intensity(19), g, NoiseSchedule::default())
            .unwrap()
            .into_model(SamplerConfig::default());
        let coarse = SemanticMask::from_fn(4, 5, |y, x| ((y * 5 + x) % 19) as u8).unwrap();
        let mask = coarse.upsample_nearest(g).unwrap();
        let img = model.vae.decode(&run_chain(&model, &mask, &tax, 3)).unwrap();
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let expected = mask.get(y, x) as f64 / 255.0;
                for c in 0..3 {
                    assert!((img.get(y, x, c) - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn control_changes_the_step() {
        let backend = toy_backend::<f64>(&TargetField::class_id_intensity(3), 1, NoiseSchedule::default())
            .unwrap();
        let tax = ClassTaxonomy::numbered(3).unwrap();
        let mask = SemanticMask::filled(2, 2, 2).unwrap();
        let cond = encode_one_hot(&mask, &tax).unwrap();
        let prompt = build_prompt(&[2], &tax, None).unwrap();
        let z = LatentCanvas::<f64>::filled(2, 2, 3, 0.1);
        let f = backend.control.features(&cond, 10, &z).unwrap();
        let a = denoise_step(&z, 10, &prompt, None, &backend.denoiser, &backend.schedule, SamplerConfig::default(), 4)
            .unwrap();
        let b = denoise_step(&z, 10, &prompt, Some(&f), &backend.denoiser, &backend.schedule, SamplerConfig::default(), 4)
            .unwrap();
        let b2 = denoise_step(&z, 10, &prompt, Some(&f), &backend.denoiser, &backend.schedule, SamplerConfig::default(), 4)
            .unwrap();
        assert_ne!(a, b);
        assert_eq!(b, b2);
        assert!(denoise_step(&z, 0, &prompt, None, &backend.denoiser, &backend.schedule, SamplerConfig::default(), 4)
            .is_err());
    }

    #[test]
    fn vae_round_trips() {
        let vae = ToyVae::new(4).unwrap();
        let z = LatentCanvas::<f64>::from_fn(3, 2, 3, |y, x, c| (y + 2 * x + c) as f64 * 0.1 - 0.3);
        let back = vae.encode(&vae.decode(&z).unwrap()).unwrap();
        assert!(back.max_abs_diff(&z).unwrap() < 1e-12);
        let img = vae.decode(&z).unwrap();
        assert!(vae.decode(&vae.encode(&img).unwrap()).unwrap().max_abs_diff(&img).unwrap() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let tax = ClassTaxonomy::numbered(2).unwrap();
        let schedule = NoiseSchedule::<f64>::default();
        let backend = toy_backend::<f64>(&TargetField::class_id_intensity(2), 2, schedule.clone()).unwrap();
        let mask = SemanticMask::from_fn(4, 4, |y, x| u8::from(x > y)).unwrap();
        let cond = encode_one_hot(&mask, &tax).unwrap();
        let prompt = build_prompt(&[0, 1], &tax, None).unwrap();
        let latent = LatentCanvas::from_fn(2, 2, 3, |y, x, c| (y as f64 - x as f64) * 0.3 + c as f64 * 0.1);
        let upstream = LatentCanvas::from_fn(2, 2, 3, |y, x, c| ((y * 6 + x * 3 + c) as f64).sin());
        let t = 17;
        let objective = |d: &ToyDenoiser<f64>, ctl: &ToyControl<f64>| {
            let f = ctl.features(&cond, t, &latent).unwrap();
            let eps = d.predict_noise(&latent, t, &schedule, &prompt, Some(&f)).unwrap();
            eps.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;

        let f = backend.control.features(&cond, t, &latent).unwrap();
        let grad = backend
            .denoiser
            .parameter_vjp(&latent, t, &schedule, &prompt, Some(&f), &upstream)
            .unwrap();
        for k in 0..3 {
            let mut p = backend.denoiser.parameters();
            p[k] += h;
            let mut plus = backend.denoiser.clone();
            plus.set_parameters(&p).unwrap();
            p[k] -= 2.0 * h;
            let mut minus = backend.denoiser.clone();
            minus.set_parameters(&p).unwrap();
            let fd = (objective(&plus, &backend.control) - objective(&minus, &backend.control)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "k={k}: {fd} vs {}", grad[k]);
        }

        let feat_grad = backend
            .denoiser
            .control_vjp(&latent, t, &schedule, &prompt, &f, &upstream)
            .unwrap();
        let grad = backend.control.parameter_vjp(&cond, t, &latent, &feat_grad).unwrap();
        let params = backend.control.parameters();
        for k in 0..params.len() {
            let mut p = params.clone();
            p[k] += h;
            let mut plus = backend.control.clone();
            plus.set_parameters(&p).unwrap();
            p[k] -= 2.0 * h;
            let mut minus = backend.control.clone();
            minus.set_parameters(&p).unwrap();
            let fd = (objective(&backend.denoiser, &plus) - objective(&backend.denoiser, &minus)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "k={k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn swapped_toy_model_loads_from_registry() {
        let tax = ClassTaxonomy::driving();
        let mut reg = ModelRegistry::in_memory();
        bootstrap_toy_registry(&mut reg, &tax, 8).unwrap();
        let model = load_swapped_toy_model::<f32>(&reg, NoiseSchedule::default(), SamplerConfig::default()).unwrap();
        assert_eq!(model.descriptor.base, PRIOR_DENOISER);
        assert_eq!(model.denoiser.model_id(), PRIOR_DENOISER);
        assert_eq!(model.control.model_id(), SOURCE_CONTROL);
        assert_eq!(model.descriptor.control_trained_against, SOURCE_DENOISER);
    }
}
