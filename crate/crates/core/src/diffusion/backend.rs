//! Model contracts: noise-predicting denoiser, control adapter, VAE, and the
//! DDIM-family reverse step that ties them together.

use crate::error::{Error, Result};
use crate::label::OneHotCondition;
use crate::prompting::PromptSpec;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, LatentCanvas, Tensor3};

use super::noise::{NoiseField, NoiseStream};
use super::registry::InferenceModelDescriptor;
use super::schedule::NoiseSchedule;

/// Spatial residuals a control adapter injects into the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFeatures<S> {
    pub residuals: Vec<Tensor3<S>>,
}

/// Predicts the noise `ε` contained in a latent at level `t`.
pub trait Denoiser<S: Scalar>: Send + Sync {
    fn model_id(&self) -> &str;

    fn predict_noise(
        &self,
        latent: &LatentCanvas<S>,
        t: usize,
        schedule: &NoiseSchedule<S>,
        prompt: &PromptSpec,
        control: Option<&ControlFeatures<S>>,
    ) -> Result<LatentCanvas<S>>;

    /// Whether tiles of one step may be evaluated concurrently.
    fn supports_concurrency(&self) -> bool {
        true
    }
}

/// Maps a one-hot condition crop (image resolution) to denoiser features.
pub trait ControlAdapter<S: Scalar>: Send + Sync {
    fn model_id(&self) -> &str;

    /// Image pixels per latent pixel along each axis.
    fn downscale(&self) -> usize;

    fn features(
        &self,
        condition: &OneHotCondition,
        t: usize,
        latent: &LatentCanvas<S>,
    ) -> Result<ControlFeatures<S>>;
}

pub trait Vae<S: Scalar>: Send + Sync {
    fn downscale(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &ImageTensor<S>) -> Result<LatentCanvas<S>>;
    fn decode(&self, latent: &LatentCanvas<S>) -> Result<ImageTensor<S>>;
}

/// A denoiser whose parameters can be fitted by first-order training.
///
/// The vector-Jacobian products return gradients of `<upstream, predict_noise(..)>`.
pub trait TrainableDenoiser<S: Scalar>: Denoiser<S> {
    fn parameters(&self) -> Vec<S>;
    fn set_parameters(&mut self, params: &[S]) -> Result<()>;

    #[allow(clippy::too_many_arguments)]
    fn parameter_vjp(
        &self,
        latent: &LatentCanvas<S>,
        t: usize,
        schedule: &NoiseSchedule<S>,
        prompt: &PromptSpec,
        control: Option<&ControlFeatures<S>>,
        upstream: &LatentCanvas<S>,
    ) -> Result<Vec<S>>;

    #[allow(clippy::too_many_arguments)]
    fn control_vjp(
        &self,
        latent: &LatentCanvas<S>,
        t: usize,
        schedule: &NoiseSchedule<S>,
        prompt: &PromptSpec,
        control: &ControlFeatures<S>,
        upstream: &LatentCanvas<S>,
    ) -> Result<ControlFeatures<S>>;
}

/// A control adapter whose parameters can be fitted by first-order training.
pub trait TrainableControl<S: Scalar>: ControlAdapter<S> {
    fn parameters(&self) -> Vec<S>;
    fn set_parameters(&mut self, params: &[S]) -> Result<()>;

    /// Gradient of `<upstream, features(..)>` with respect to the parameters.
    fn parameter_vjp(
        &self,
        condition: &OneHotCondition,
        t: usize,
        latent: &LatentCanvas<S>,
        upstream: &ControlFeatures<S>,
    ) -> Result<Vec<S>>;
}

/// Reverse-step settings. `eta = 0` is deterministic DDIM, `eta = 1` is
/// DDPM-like ancestral sampling with noise from the seeded field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { eta: 1.0 }
    }
}

/// `x_t = sqrt(ᾱ_t) · x_0 + sqrt(1 - ᾱ_t) · ε`.
pub fn forward_diffuse<S: Scalar>(
    latent0: &LatentCanvas<S>,
    t: usize,
    noise: &LatentCanvas<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<LatentCanvas<S>> {
    schedule.check_level(t)?;
    latent0.ensure_same_shape(noise, "forward_diffuse latent vs noise")?;
    let a = schedule.alpha_bar(t);
    let (signal, sigma) = (a.sqrt(), (S::one() - a).sqrt());
    let data = latent0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| signal * x + sigma * e)
        .collect();
    let (h, w, c) = latent0.shape();
    LatentCanvas::from_vec(h, w, c, data)
}

/// One reverse step from level `t` to `t - 1` given the noise estimate.
///
/// `noise` supplies the ancestral term and is ignored when `eta = 0`.
pub fn ddim_update<S: Scalar>(
    latent_t: &LatentCanvas<S>,
    eps: &LatentCanvas<S>,
    t: usize,
    schedule: &NoiseSchedule<S>,
    sampler: SamplerConfig,
    noise: &LatentCanvas<S>,
) -> Result<LatentCanvas<S>> {
    if t == 0 {
        return Err(Error::arg("cannot denoise below timestep 0"));
    }
    schedule.check_level(t)?;
    latent_t.ensure_same_shape(eps, "ddim_update latent vs noise estimate")?;
    latent_t.ensure_same_shape(noise, "ddim_update latent vs ancestral noise")?;
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t - 1);
    let eta = S::of(sampler.eta);
    let sigma = eta * ((S::one() - a_prev) / (S::one() - a_t)).sqrt() * (S::one() - a_t / a_prev).sqrt();
    let dir = (S::one() - a_prev - sigma * sigma).max(S::zero()).sqrt();
    let (sqrt_a_t, sqrt_1m_a_t, sqrt_a_prev) = (a_t.sqrt(), (S::one() - a_t).sqrt(), a_prev.sqrt());
    let data = latent_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| {
            let x0 = (x - sqrt_1m_a_t * e) / sqrt_a_t;
            sqrt_a_prev * x0 + dir * e + sigma * z
        })
        .collect();
    let (h, w, c) = latent_t.shape();
    LatentCanvas::from_vec(h, w, c, data)
}

/// Predicts noise with `denoiser` and applies [`ddim_update`] using an explicit
/// ancestral noise tensor.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step_with_noise<S: Scalar>(
    latent_t: &LatentCanvas<S>,
    t: usize,
    prompt: &PromptSpec,
    control: Option<&ControlFeatures<S>>,
    denoiser: &dyn Denoiser<S>,
    schedule: &NoiseSchedule<S>,
    sampler: SamplerConfig,
    noise: &LatentCanvas<S>,
) -> Result<LatentCanvas<S>> {
    if t == 0 {
        return Err(Error::arg("cannot denoise below timestep 0"));
    }
    let eps = denoiser.predict_noise(latent_t, t, schedule, prompt, control)?;
    ddim_update(latent_t, &eps, t, schedule, sampler, noise)
}

/// One seeded reverse step over a whole latent; the ancestral noise is drawn
/// from `NoiseField::new(seed)` anchored at the latent's origin.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<S: Scalar>(
    latent_t: &LatentCanvas<S>,
    t: usize,
    prompt: &PromptSpec,
    control: Option<&ControlFeatures<S>>,
    denoiser: &dyn Denoiser<S>,
    schedule: &NoiseSchedule<S>,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<LatentCanvas<S>> {
    let (h, w, c) = latent_t.shape();
    let noise = NoiseField::new(seed).window(NoiseStream::Ancestral(t), (0, 0), h, w, c);
    denoise_step_with_noise(latent_t, t, prompt, control, denoiser, schedule, sampler, &noise)
}

/// Denoiser + control adapter + VAE + schedule, ready for controlled sampling.
pub struct ControlledModel<S: Scalar> {
    pub descriptor: InferenceModelDescriptor,
    pub denoiser: Box<dyn Denoiser<S>>,
    pub control: Box<dyn ControlAdapter<S>>,
    pub vae: Box<dyn Vae<S>>,
    pub schedule: NoiseSchedule<S>,
    pub sampler: SamplerConfig,
}

impl<S: Scalar> std::fmt::Debug for ControlledModel<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlledModel")
            .field("descriptor", &self.descriptor)
            .field("steps", &self.schedule.num_steps())
            .field("sampler", &self.sampler)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> ControlledModel<S> {
    /// One controlled reverse step on a latent tile and its aligned condition crop.
    pub fn step(
        &self,
        latent_t: &LatentCanvas<S>,
        condition: &OneHotCondition,
        t: usize,
        prompt: &PromptSpec,
        noise: &LatentCanvas<S>,
    ) -> Result<LatentCanvas<S>> {
        let g = self.control.downscale();
        if condition.height() != latent_t.height() * g || condition.width() != latent_t.width() * g {
            return Err(Error::shape(format!(
                "condition {}x{} does not map to latent {}x{} at downscale {g}",
                condition.height(),
                condition.width(),
                latent_t.height(),
                latent_t.width()
            )));
        }
        let features = self.control.features(condition, t, latent_t)?;
        denoise_step_with_noise(
            latent_t,
            t,
            prompt,
            Some(&features),
            self.denoiser.as_ref(),
            &self.schedule,
            self.sampler,
            noise,
        )
    }

    pub fn downscale(&self) -> usize {
        self.vae.downscale()
    }

    pub fn latent_channels(&self) -> usize {
        self.vae.latent_channels()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule<f64> {
        NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.5, 0.25]).unwrap()
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = schedule();
        let x0 = LatentCanvas::filled(1, 1, 1, 2.0);
        let e = LatentCanvas::filled(1, 1, 1, 4.0);
        assert_eq!(forward_diffuse(&x0, 0, &e, &s).unwrap(), x0);
        let xt = forward_diffuse(&x0, 2, &e, &s).unwrap();
        // 0.5 * 2 + sqrt(0.75) * 4
        assert!((xt.get(0, 0, 0) - (1.0 + 0.75f64.sqrt() * 4.0)).abs() < 1e-12);
        assert!((xt.get(0, 0, 0) - 4.4641).abs() < 1e-4);
        let zero = LatentCanvas::zeros(1, 1, 1);
        assert_eq!(forward_diffuse(&x0, 2, &zero, &s).unwrap().get(0, 0, 0), 1.0);
        let bad = LatentCanvas::zeros(1, 2, 1);
        assert!(forward_diffuse(&x0, 1, &bad, &s).is_err());
        assert!(forward_diffuse(&x0, 3, &e, &s).is_err());
    }

    #[test]
    fn update_reaches_clean_estimate_at_final_step() {
        let s = schedule();
        let x0 = LatentCanvas::filled(2, 2, 1, 0.3);
        let eps = LatentCanvas::filled(2, 2, 1, -1.2);
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let z = LatentCanvas::filled(2, 2, 1, 5.0);
        let out = ddim_update(&xt, &eps, 1, &s, SamplerConfig { eta: 1.0 }, &z).unwrap();
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-12);
        assert!(ddim_update(&xt, &eps, 0, &s, SamplerConfig::default(), &z).is_err());
    }
}
