//! Style Swap training stages on trainable backends: source-domain fine-tune
//! of the denoiser, adapter training against the fine-tuned denoiser, and
//! swapped inference assembly.
//!
//! Both stages minimise the noise-prediction MSE with plain SGD. Every
//! iteration draws from an RNG seeded by `(seed, iteration)`, so a run resumed
//! from a checkpoint is bit-identical to an uninterrupted one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::toy::{
    load_swapped_toy_model, load_toy_denoiser, register_toy_control, register_toy_denoiser,
    ToyControl, ToyVae,
};
use crate::diffusion::{
    derive_seed, forward_diffuse, ControlAdapter, ControlledModel, Denoiser, LinearBetaSchedule,
    ModelRegistry, NoiseSchedule, Provenance, SamplerConfig, TrainableControl, TrainableDenoiser,
    Vae, PRIOR_DENOISER, SOURCE_CONTROL, SOURCE_DENOISER,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::label::{compute_class_frequencies, encode_one_hot, ClassTaxonomy, SemanticMask};
use crate::prompting::{tile_prompt, PromptSpec};
use crate::rcg::{sample_training_pair, sampling_probabilities, ClassDistribution, MaskIndex};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, LatentCanvas};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    DreamboothFinetune,
    ControlnetTrain,
}

impl TrainingStage {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingStage::DreamboothFinetune => "dreambooth_finetune",
            TrainingStage::ControlnetTrain => "controlnet_train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRunConfig {
    pub stage: TrainingStage,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Square crop side in image pixels.
    pub crop_size: usize,
    pub resize_min: f64,
    pub resize_max: f64,
    pub rcg_enabled: bool,
    pub temperature: f64,
    pub seed: u64,
    pub base_model_id: String,
    pub output_id: String,
    pub downscale: usize,
    pub num_steps: usize,
    /// Iterations between resumable checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Iterations per entry of the recorded loss curve.
    pub log_every: usize,
    /// Permits training the adapter against the prior denoiser.
    pub force: bool,
}

impl TrainingRunConfig {
    pub fn finetune() -> Self {
        Self {
            stage: TrainingStage::DreamboothFinetune,
            iterations: 10_000,
            learning_rate: 2e-6,
            crop_size: 512,
            resize_min: 0.5,
            resize_max: 2.0,
            rcg_enabled: true,
            temperature: crate::rcg::DEFAULT_TEMPERATURE,
            seed: 0,
            base_model_id: PRIOR_DENOISER.to_string(),
            output_id: SOURCE_DENOISER.to_string(),
            downscale: 8,
            num_steps: crate::diffusion::DEFAULT_INFERENCE_STEPS,
            checkpoint_every: 1000,
            log_every: 100,
            force: false,
        }
    }

    pub fn control() -> Self {
        Self {
            stage: TrainingStage::ControlnetTrain,
            base_model_id: SOURCE_DENOISER.to_string(),
            output_id: SOURCE_CONTROL.to_string(),
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("training.iterations must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if self.downscale == 0 || self.crop_size == 0 || self.crop_size % self.downscale != 0 {
            return Err(Error::Config(format!(
                "training.crop_size {} must be a positive multiple of the downscale {}",
                self.crop_size, self.downscale
            )));
        }
        if !(self.resize_min > 0.0 && self.resize_min <= self.resize_max && self.resize_max.is_finite()) {
            return Err(Error::Config("training resize range must satisfy 0 < min <= max".into()));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("training.num_steps must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("training.log_every must be >= 1".into()));
        }
        Ok(())
    }

    fn schedule<S: Scalar>(&self) -> Result<NoiseSchedule<S>> {
        NoiseSchedule::linear(self.num_steps, LinearBetaSchedule::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub run_id: String,
    pub config: TrainingRunConfig,
    /// Mean loss of each consecutive `log_every`-iteration block.
    pub interval_losses: Vec<f64>,
    pub iterations_done: usize,
    pub completed: bool,
    pub checkpoint_id: Option<String>,
    pub resumed_from: Option<usize>,
    /// Training pairs drawn per mask id (adapter stage).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pair_draws: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Where to persist resumable state, and an optional early stop used to
/// simulate interruptions.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub work_dir: Option<PathBuf>,
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    config: TrainingRunConfig,
    iteration: usize,
    params: Vec<f64>,
    losses: Vec<f64>,
    pair_draws: BTreeMap<String, u64>,
}

const STATE_FILE: &str = "train_state.json";

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_id(config: &TrainingRunConfig) -> String {
    format!("{}-{}-seed{}", config.stage.as_str(), config.output_id, config.seed)
}

fn load_state(dir: &Path, config: &TrainingRunConfig) -> Result<Option<TrainState>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
    let state: TrainState = serde_json::from_slice(&bytes)?;
    if &state.config != config {
        return Err(Error::Config(format!(
            "{} belongs to a run with a different configuration",
            path.display()
        )));
    }
    Ok(Some(state))
}

fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    write_atomic(&dir.join(STATE_FILE), &serde_json::to_vec(state)?)
}

/// Scales by a factor drawn from `[min, max]` (raised if needed so the crop
/// fits), then takes a random `crop × crop` window. The mask uses nearest
/// resampling, the image bilinear.
pub fn random_resized_crop<S: Scalar, R: Rng + ?Sized>(
    image: &ImageTensor<S>,
    mask: Option<&SemanticMask>,
    crop: usize,
    (min, max): (f64, f64),
    rng: &mut R,
) -> Result<(ImageTensor<S>, Option<SemanticMask>)> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::arg("cannot crop an empty image"));
    }
    let fit = (crop as f64 / h as f64).max(crop as f64 / w as f64);
    let scale = if max > min { rng.random_range(min..=max) } else { min }.max(fit);
    let rh = ((h as f64 * scale).round() as usize).max(crop);
    let rw = ((w as f64 * scale).round() as usize).max(crop);
    let y0 = rng.random_range(0..=rh - crop);
    let x0 = rng.random_range(0..=rw - crop);
    let img = if (rh, rw) == (h, w) {
        image.crop(y0, x0, crop, crop)?
    } else {
        image.resize_bilinear(rh, rw)?.crop(y0, x0, crop, crop)?
    };
    let m = match mask {
        Some(m) if (m.height(), m.width()) == (rh, rw) => Some(m.crop(y0, x0, crop, crop)?),
        Some(m) => Some(m.resize_nearest(rh, rw)?.crop(y0, x0, crop, crop)?),
        None => None,
    };
    Ok((img, m))
}

/// Draws `(t, ε)` and returns `(x_t, ε, t)` for clean latent `x0`.
fn noised<S: Scalar>(
    x0: &LatentCanvas<S>,
    schedule: &NoiseSchedule<S>,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentCanvas<S>, LatentCanvas<S>, usize)> {
    let t = rng.random_range(1..=schedule.num_steps());
    let (h, w, c) = x0.shape();
    let eps = LatentCanvas::from_fn(h, w, c, |_, _, _| S::of(rng.sample::<f64, _>(StandardNormal)));
    let xt = forward_diffuse(x0, t, &eps, schedule)?;
    Ok((xt, eps, t))
}

/// Mean squared error and its gradient with respect to the prediction.
fn mse<S: Scalar>(pred: &LatentCanvas<S>, target: &LatentCanvas<S>) -> (f64, LatentCanvas<S>) {
    let n = S::of(pred.data().len() as f64);
    let diff: Vec<S> = pred.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|&d| d * d).sum::<S>() / n;
    let (h, w, c) = pred.shape();
    let grad = LatentCanvas::from_vec(h, w, c, diff.into_iter().map(|d| S::of(2.0) * d / n).collect())
        .expect("same shape");
    (loss.as_f64(), grad)
}

fn sgd<S: Scalar>(params: &mut [S], grad: &[S], lr: f64) {
    let lr = S::of(lr);
    for (p, &g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn interval_means(losses: &[f64], every: usize) -> Vec<f64> {
    losses
        .chunks(every)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn domain_prompt() -> PromptSpec {
    tile_prompt(&[], &ClassTaxonomy::numbered(1).expect("one class"), None).expect("bare prefix")
}

fn write_record(registry: &ModelRegistry, record: &TrainingRunRecord) -> Result<()> {
    if let Some(root) = registry.root() {
        let dir = root.join("runs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        write_atomic(
            &dir.join(format!("{}.json", record.run_id)),
            &serde_json::to_vec_pretty(record)?,
        )?;
    }
    Ok(())
}

struct Loop<'a> {
    config: &'a TrainingRunConfig,
    control: &'a RunControl,
    state: TrainState,
    resumed_from: Option<usize>,
    started: u64,
}

impl<'a> Loop<'a> {
    fn start(config: &'a TrainingRunConfig, control: &'a RunControl, params: Vec<f64>) -> Result<Self> {
        let resumed = match &control.work_dir {
            Some(dir) => load_state(dir, config)?,
            None => None,
        };
        let resumed_from = resumed.as_ref().map(|s| s.iteration);
        if let Some(it) = resumed_from {
            info!("resuming {} at iteration {it}", config.output_id);
        }
        let state = resumed.unwrap_or(TrainState {
            config: config.clone(),
            iteration: 0,
            params,
            losses: Vec::new(),
            pair_draws: BTreeMap::new(),
        });
        Ok(Self {
            config,
            control,
            state,
            resumed_from,
            started: now_unix(),
        })
    }

    /// Whether another iteration should run in this process.
    fn more(&self) -> bool {
        let budget = self.control.stop_after.unwrap_or(usize::MAX);
        self.state.iteration < self.config.iterations
            && self.state.iteration - self.resumed_from.unwrap_or(0) < budget
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.state.iteration as u64))
    }

    fn finish_iteration<S: Scalar>(&mut self, params: &[S], loss: f64) -> Result<()> {
        self.state.losses.push(loss);
        self.state.iteration += 1;
        let it = self.state.iteration;
        if it % self.config.log_every == 0 {
            debug!("{} iteration {it}: loss {loss:.6e}", self.config.output_id);
        }
        let every = self.config.checkpoint_every;
        if let Some(dir) = &self.control.work_dir {
            if (every > 0 && it % every == 0) || !self.more() {
                self.state.params = params.iter().map(|p| p.as_f64()).collect();
                save_state(dir, &self.state)?;
            }
        }
        Ok(())
    }

    fn record(&self, checkpoint_id: Option<String>) -> TrainingRunRecord {
        TrainingRunRecord {
            run_id: run_id(self.config),
            config: self.config.clone(),
            interval_losses: interval_means(&self.state.losses, self.config.log_every),
            iterations_done: self.state.iteration,
            completed: checkpoint_id.is_some(),
            checkpoint_id,
            resumed_from: self.resumed_from,
            pair_draws: self.state.pair_draws.clone(),
            started_unix: self.started,
            finished_unix: now_unix(),
        }
    }
}

/// Fine-tunes the base denoiser on source-domain images with the
/// reconstruction (noise-prediction) loss and registers the result.
pub fn finetune_source<S: Scalar>(
    images: &[ImageTensor<S>],
    registry: &mut ModelRegistry,
    config: &TrainingRunConfig,
    control: &RunControl,
) -> Result<TrainingRunRecord> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("fine-tuning needs at least one image".into()));
    }
    let mut denoiser = load_toy_denoiser::<S>(registry, &config.base_model_id)?;
    let vae = ToyVae::new(config.downscale)?;
    let schedule = config.schedule::<S>()?;
    let prompt = domain_prompt();
    let init = TrainableDenoiser::parameters(&denoiser).iter().map(|p| p.as_f64()).collect();
    let mut run = Loop::start(config, control, init)?;
    let mut params: Vec<S> = run.state.params.iter().map(|&p| S::of(p)).collect();
    TrainableDenoiser::set_parameters(&mut denoiser, &params)?;

    while run.more() {
        let mut rng = run.rng();
        let image = &images[rng.random_range(0..images.len())];
        let (crop, _) = random_resized_crop(
            image,
            None,
            config.crop_size,
            (config.resize_min, config.resize_max),
            &mut rng,
        )?;
        let x0 = vae.encode(&crop)?;
        let (xt, eps, t) = noised(&x0, &schedule, &mut rng)?;
        let pred = denoiser.predict_noise(&xt, t, &schedule, &prompt, None)?;
        let (loss, upstream) = mse(&pred, &eps);
        let grad = denoiser.parameter_vjp(&xt, t, &schedule, &prompt, None, &upstream)?;
        sgd(&mut params, &grad, config.learning_rate);
        TrainableDenoiser::set_parameters(&mut denoiser, &params)?;
        run.finish_iteration(&params, loss)?;
    }

    let checkpoint = if run.state.iteration >= config.iterations {
        let provenance = Provenance {
            run_id: Some(run_id(config)),
            parent: Some(config.base_model_id.clone()),
            ..Provenance::stage(config.stage.as_str())
        };
        register_toy_denoiser(
            registry,
            &config.output_id,
            &denoiser.clone().with_id(&config.output_id),
            Some(&config.base_model_id),
            provenance,
        )?;
        Some(config.output_id.clone())
    } else {
        None
    };
    let record = run.record(checkpoint);
    write_record(registry, &record)?;
    Ok(record)
}

/// An aligned training pair.
#[derive(Debug, Clone)]
pub struct TrainingPair<S> {
    pub id: String,
    pub mask: SemanticMask,
    pub image: ImageTensor<S>,
}

/// Trains a zero-initialised adapter against the (frozen) base denoiser on
/// one-hot mask crops with class-list prompts. With RCG enabled, pairs are
/// drawn class-first from the temperature softmax.
pub fn train_control<S: Scalar>(
    pairs: &[TrainingPair<S>],
    taxonomy: &ClassTaxonomy,
    registry: &mut ModelRegistry,
    config: &TrainingRunConfig,
    control: &RunControl,
) -> Result<TrainingRunRecord> {
    config.validate()?;
    if config.base_model_id == PRIOR_DENOISER && !config.force {
        return Err(Error::Protocol(format!(
            "the adapter must be trained against `{SOURCE_DENOISER}`, not `{PRIOR_DENOISER}`; \
             run the fine-tune stage first or pass an explicit force override"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Dataset("adapter training needs at least one pair".into()));
    }
    for p in pairs {
        if (p.mask.height(), p.mask.width()) != (p.image.height(), p.image.width()) {
            return Err(Error::Dataset(format!(
                "pair `{}`: mask {}x{} vs image {}x{}",
                p.id,
                p.mask.height(),
                p.mask.width(),
                p.image.height(),
                p.image.width()
            )));
        }
        p.mask.validate(taxonomy)?;
    }
    let denoiser = load_toy_denoiser::<S>(registry, &config.base_model_id)?;
    let vae = ToyVae::new(config.downscale)?;
    let schedule = config.schedule::<S>()?;
    let channels = Vae::<S>::latent_channels(&vae);

    let masks: Vec<SemanticMask> = pairs.iter().map(|p| p.mask.clone()).collect();
    let index = MaskIndex::new(
        pairs.iter().map(|p| (p.id.clone(), p.mask.class_set())).collect(),
        taxonomy.num_classes(),
    )?;
    let dist: ClassDistribution<f64> = if config.rcg_enabled {
        sampling_probabilities(&compute_class_frequencies(&masks, taxonomy)?, config.temperature)?
    } else {
        ClassDistribution::uniform(taxonomy.num_classes())?
    };

    let mut adapter = ToyControl::<S>::new(
        &config.output_id,
        config.downscale,
        vec![vec![S::zero(); channels]; taxonomy.num_classes()],
    )?;
    let init = TrainableControl::parameters(&adapter).iter().map(|p| p.as_f64()).collect();
    let mut run = Loop::start(config, control, init)?;
    let mut params: Vec<S> = run.state.params.iter().map(|&p| S::of(p)).collect();
    TrainableControl::set_parameters(&mut adapter, &params)?;

    while run.more() {
        let mut rng = run.rng();
        let pick = if config.rcg_enabled {
            sample_training_pair(&index, &dist, &mut rng)?.mask
        } else {
            rng.random_range(0..pairs.len())
        };
        let pair = &pairs[pick];
        *run.state.pair_draws.entry(pair.id.clone()).or_default() += 1;
        let (img, mask) = random_resized_crop(
            &pair.image,
            Some(&pair.mask),
            config.crop_size,
            (config.resize_min, config.resize_max),
            &mut rng,
        )?;
        let mask = mask.expect("mask was passed");
        let condition = encode_one_hot(&mask, taxonomy)?;
        let prompt = tile_prompt(&mask.class_set(), taxonomy, None)?;
        let x0 = vae.encode(&img)?;
        let (xt, eps, t) = noised(&x0, &schedule, &mut rng)?;
        let features = adapter.features(&condition, t, &xt)?;
        let pred = denoiser.predict_noise(&xt, t, &schedule, &prompt, Some(&features))?;
        let (loss, upstream) = mse(&pred, &eps);
        let feature_grad = denoiser.control_vjp(&xt, t, &schedule, &prompt, &features, &upstream)?;
        let grad = adapter.parameter_vjp(&condition, t, &xt, &feature_grad)?;
        sgd(&mut params, &grad, config.learning_rate);
        TrainableControl::set_parameters(&mut adapter, &params)?;
        run.finish_iteration(&params, loss)?;
    }

    let checkpoint = if run.state.iteration >= config.iterations {
        let provenance = Provenance {
            run_id: Some(run_id(config)),
            parent: Some(config.base_model_id.clone()),
            forced_override: config.force && config.base_model_id == PRIOR_DENOISER,
            ..Provenance::stage(config.stage.as_str())
        };
        register_toy_control(registry, &config.output_id, &adapter, &config.base_model_id, provenance)?;
        Some(config.output_id.clone())
    } else {
        None
    };
    let record = run.record(checkpoint);
    write_record(registry, &record)?;
    Ok(record)
}

/// `U_P` at runtime with `control_S`; fails with a hint when a stage is missing.
pub fn build_inference_model<S: Scalar>(
    registry: &ModelRegistry,
    num_steps: usize,
    sampler: SamplerConfig,
) -> Result<ControlledModel<S>> {
    for (id, hint) in [
        (PRIOR_DENOISER, "register a pretrained prior denoiser"),
        (SOURCE_CONTROL, "run train-control to produce it"),
    ] {
        if !registry.contains(id) {
            return Err(Error::MissingCheckpoint(format!("{id} ({hint})")));
        }
    }
    let schedule = NoiseSchedule::linear(num_steps, LinearBetaSchedule::default())?;
    load_swapped_toy_model(registry, schedule, sampler)
}
