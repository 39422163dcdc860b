//! Layered pipeline configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasetgen::GenerationConfig;
use crate::diffusion::toy::TOY_BACKEND;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::mrlf::{MrlfConfig, StrideSpace, TilingMode};
use crate::prompting::StyleCatalog;
use crate::training::TrainingRunConfig;

pub const BACKENDS: &[&str] = &[TOY_BACKEND];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 means one per logical core.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub backend: String,
    pub steps: usize,
    pub eta: f64,
    pub downscale: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            backend: TOY_BACKEND.to_string(),
            steps: crate::diffusion::DEFAULT_INFERENCE_STEPS,
            eta: 1.0,
            downscale: crate::diffusion::toy::DEFAULT_DOWNSCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcgSection {
    pub enabled: bool,
    pub temperature: f64,
}

impl Default for RcgSection {
    fn default() -> Self {
        Self {
            enabled: true,
            temperature: crate::rcg::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub mix_ratio: f64,
    pub styles: Vec<String>,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            mix_ratio: 0.5,
            styles: StyleCatalog::adverse_weather()
                .tokens()
                .into_iter()
                .map(str::to_string)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrlfSection {
    pub s: usize,
    pub stride: usize,
    pub stride_space: StrideSpace,
    pub area_threshold: f64,
    pub base_latent_h: usize,
    pub base_latent_w: usize,
    pub tiling: TilingMode,
}

impl Default for MrlfSection {
    fn default() -> Self {
        let d = MrlfConfig::default();
        Self {
            s: d.s,
            stride: d.stride,
            stride_space: d.stride_space,
            area_threshold: d.area_threshold,
            base_latent_h: d.base_latent_h,
            base_latent_w: d.base_latent_w,
            tiling: d.tiling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub n: usize,
    pub retries: u32,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let d = GenerationConfig::default();
        Self {
            n: d.n,
            retries: d.retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub crop_size: usize,
    pub resize_min: f64,
    pub resize_max: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl From<&TrainingRunConfig> for TrainSection {
    fn from(c: &TrainingRunConfig) -> Self {
        Self {
            iterations: c.iterations,
            learning_rate: c.learning_rate,
            crop_size: c.crop_size,
            resize_min: c.resize_min,
            resize_max: c.resize_max,
            checkpoint_every: c.checkpoint_every,
            log_every: c.log_every,
        }
    }
}

fn finetune_default() -> TrainSection {
    (&TrainingRunConfig::finetune()).into()
}

fn control_default() -> TrainSection {
    (&TrainingRunConfig::control()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub diffusion: DiffusionSection,
    pub rcg: RcgSection,
    pub prompt: PromptSection,
    pub mrlf: MrlfSection,
    pub generation: GenerationSection,
    #[serde(default = "finetune_default")]
    pub finetune: TrainSection,
    #[serde(default = "control_default")]
    pub control: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            diffusion: DiffusionSection::default(),
            rcg: RcgSection::default(),
            prompt: PromptSection::default(),
            mrlf: MrlfSection::default(),
            generation: GenerationSection::default(),
            finetune: finetune_default(),
            control: control_default(),
        }
    }
}

/// One addressable key with its default and a short description.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigKey {
    pub key: String,
    pub default: String,
    pub help: &'static str,
}

const KEY_HELP: &[(&str, &str)] = &[
    ("run.seed", "master seed for every random draw"),
    ("run.workers", "worker threads, 0 = logical cores"),
    ("diffusion.backend", "denoising backend"),
    ("diffusion.steps", "inference denoising steps"),
    ("diffusion.eta", "sampler stochasticity, 0 = DDIM, 1 = ancestral"),
    ("diffusion.downscale", "image pixels per latent pixel"),
    ("rcg.enabled", "rare-class weighted mask and pair selection"),
    ("rcg.temperature", "softmax temperature of the rare-class distribution"),
    ("prompt.mix_ratio", "fraction of prompts carrying a style qualifier"),
    ("prompt.styles", "style qualifier tokens"),
    ("mrlf.s", "upscale factor of the second pass"),
    ("mrlf.stride", "tile stride"),
    ("mrlf.stride_space", "unit of the stride: latent or image"),
    ("mrlf.area_threshold", "minimum component area fraction kept from the first pass"),
    ("mrlf.base_latent_h", "first-pass latent height, also the tile height"),
    ("mrlf.base_latent_w", "first-pass latent width, also the tile width"),
    ("mrlf.tiling", "tiled or untiled second pass"),
    ("generation.n", "number of images to generate"),
    ("generation.retries", "extra attempts per failed job"),
    ("finetune.iterations", "fine-tune iterations"),
    ("finetune.learning_rate", "fine-tune learning rate"),
    ("finetune.crop_size", "square training crop in image pixels"),
    ("finetune.resize_min", "smallest random resize factor"),
    ("finetune.resize_max", "largest random resize factor"),
    ("finetune.checkpoint_every", "iterations between resumable checkpoints, 0 = off"),
    ("finetune.log_every", "iterations per recorded loss value"),
    ("control.iterations", "adapter training iterations"),
    ("control.learning_rate", "adapter learning rate"),
    ("control.crop_size", "square training crop in image pixels"),
    ("control.resize_min", "smallest random resize factor"),
    ("control.resize_max", "largest random resize factor"),
    ("control.checkpoint_every", "iterations between resumable checkpoints, 0 = off"),
    ("control.log_every", "iterations per recorded loss value"),
];

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with `file` (if any) and then `overrides`
    /// (`section.key=value`, value in TOML syntax or a bare string).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::default()).map_err(|e| Error::Toml(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
            let over: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, over);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form section.key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{key}` is not of the form section.key")))?;
            let mut inner = toml::Table::new();
            inner.insert(field.to_string(), parse_value(raw.trim()));
            let mut over = toml::Table::new();
            over.insert(section.to_string(), toml::Value::Table(inner));
            merge(&mut table, over);
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !BACKENDS.contains(&self.diffusion.backend.as_str()) {
            return Err(Error::Config(format!(
                "diffusion.backend `{}` is not available (available: {})",
                self.diffusion.backend,
                BACKENDS.join(", ")
            )));
        }
        if !(self.diffusion.eta.is_finite() && self.diffusion.eta >= 0.0) {
            return Err(Error::Config("diffusion.eta must be >= 0".into()));
        }
        if self.diffusion.downscale == 0 {
            return Err(Error::Config("diffusion.downscale must be >= 1".into()));
        }
        if !(self.rcg.temperature.is_finite() && self.rcg.temperature > 0.0) {
            return Err(Error::Config("rcg.temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt.mix_ratio) {
            return Err(Error::Config("prompt.mix_ratio must lie in [0, 1]".into()));
        }
        if self.generation.n == 0 {
            return Err(Error::Config("generation.n must be >= 1".into()));
        }
        self.mrlf_config().validate()?;
        self.finetune_config().validate()?;
        self.control_config().validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            eta: self.diffusion.eta,
        }
    }

    pub fn mrlf_config(&self) -> MrlfConfig {
        let m = &self.mrlf;
        MrlfConfig {
            s: m.s,
            stride: m.stride,
            stride_space: m.stride_space,
            area_threshold: m.area_threshold,
            steps: self.diffusion.steps,
            seed: self.run.seed,
            base_latent_h: m.base_latent_h,
            base_latent_w: m.base_latent_w,
            tiling: m.tiling,
            ..MrlfConfig::default()
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            n: self.generation.n,
            rcg_enabled: self.rcg.enabled,
            temperature: self.rcg.temperature,
            mix_ratio: self.prompt.mix_ratio,
            styles: self.prompt.styles.clone(),
            seed: self.run.seed,
            retries: self.generation.retries,
            mrlf: self.mrlf_config(),
        }
    }

    fn training(&self, base: TrainingRunConfig, t: &TrainSection) -> TrainingRunConfig {
        TrainingRunConfig {
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            crop_size: t.crop_size,
            resize_min: t.resize_min,
            resize_max: t.resize_max,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            rcg_enabled: self.rcg.enabled,
            temperature: self.rcg.temperature,
            seed: self.run.seed,
            downscale: self.diffusion.downscale,
            num_steps: self.diffusion.steps,
            ..base
        }
    }

    pub fn finetune_config(&self) -> TrainingRunConfig {
        self.training(TrainingRunConfig::finetune(), &self.finetune)
    }

    pub fn control_config(&self) -> TrainingRunConfig {
        self.training(TrainingRunConfig::control(), &self.control)
    }

    /// Every addressable key in `sections`, with its default value.
    pub fn keys(sections: &[&str]) -> Vec<ConfigKey> {
        let table = toml::Table::try_from(Self::default()).expect("config serializes");
        KEY_HELP
            .iter()
            .filter(|(k, _)| sections.iter().any(|s| k.split('.').next() == Some(*s)))
            .map(|&(key, help)| {
                let (s, f) = key.split_once('.').expect("dotted key");
                let default = table[s].as_table().and_then(|t| t.get(f)).map(|v| v.to_string()).unwrap_or_default();
                ConfigKey {
                    key: key.to_string(),
                    default,
                    help,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.mrlf.s, 2);
        assert_eq!(c.mrlf.stride, 16);
        assert_eq!(c.rcg.temperature, 0.01);
        assert_eq!(c.generation.n, 6000);
        assert_eq!(c.finetune.crop_size, 512);
        assert_eq!(c.finetune.iterations, 10_000);
        assert_eq!(c.finetune.learning_rate, 2e-6);
        assert_eq!(c.prompt.styles, ["foggy", "snowy", "rainy", "overcast", "night"]);
        assert_eq!(c.prompt.mix_ratio, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[mrlf]\nstride = 8\ns = 3\n[run]\nseed = 5\n").unwrap();
        let c = PipelineConfig::resolve(Some(&path), &["mrlf.s=4".into(), "prompt.styles=[\"foggy\"]".into()]).unwrap();
        assert_eq!((c.mrlf.stride, c.mrlf.s, c.run.seed), (8, 4, 5));
        assert_eq!(c.prompt.styles, ["foggy"]);
        assert_eq!(c.generation_config().mrlf.seed, 5);
        let back = PipelineConfig::resolve(None, &[]).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(PipelineConfig::resolve(None, &["mrlf.bogus=1".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["nosection=1".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["diffusion.backend=sd15".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["finetune.iterations=0".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["mrlf.tiling=untiled".into()]).is_ok());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = PipelineConfig::resolve(None, &["rcg.enabled=false".into()]).unwrap();
        let back: PipelineConfig = toml::from_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_documented() {
        let table = toml::Table::try_from(PipelineConfig::default()).unwrap();
        let mut all: Vec<String> = table
            .iter()
            .flat_map(|(s, v)| v.as_table().unwrap().keys().map(move |k| format!("{s}.{k}")))
            .collect();
        all.sort();
        let mut documented: Vec<String> = KEY_HELP.iter().map(|(k, _)| k.to_string()).collect();
        documented.sort();
        assert_eq!(all, documented);
        assert_eq!(PipelineConfig::keys(&["rcg"]).len(), 2);
    }
}
