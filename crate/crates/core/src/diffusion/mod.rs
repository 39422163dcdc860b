//! Backend-agnostic diffusion contracts, the seeded sampler, the toy backend
//! and the checkpoint registry.

mod backend;
mod noise;
mod registry;
mod schedule;
pub mod toy;

pub use backend::{
    ddim_update, denoise_step, denoise_step_with_noise, forward_diffuse, ControlAdapter,
    ControlFeatures, ControlledModel, Denoiser, SamplerConfig, TrainableControl, TrainableDenoiser,
    Vae,
};
pub use noise::{derive_seed, NoiseField, NoiseStream};
pub use registry::{
    assemble_swapped, CheckpointDescriptor, InferenceModelDescriptor, ModelKind, ModelRegistry,
    Provenance, DESCRIPTOR_FILE, PRIOR_DENOISER, SOURCE_CONTROL, SOURCE_DENOISER, WEIGHTS_FILE,
};
pub use schedule::{LinearBetaSchedule, NoiseSchedule, DEFAULT_INFERENCE_STEPS};
