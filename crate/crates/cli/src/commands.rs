use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use segsynth::datasetgen::{plan_jobs, run_jobs, validate_dataset, GenerationConfig, MaskCorpus, RunOptions};
use segsynth::diffusion::toy::{bootstrap_toy_prior, bootstrap_toy_registry};
use segsynth::diffusion::{ModelRegistry, PRIOR_DENOISER};
use segsynth::fsutil::write_atomic;
use segsynth::label::{read_mask_png, read_rgb_png};
use segsynth::rcg::sampling_probabilities;
use segsynth::synth::write_demo_corpus;
use segsynth::training::{build_inference_model, finetune_source, train_control, RunControl, TrainingPair, TrainingRunRecord};
use segsynth::{ClassTaxonomy, Image64, Model, PipelineConfig};

use crate::{Cli, Command, DemoArgs, FinetuneArgs, GenerateArgs, StatsArgs, TrainControlArgs, ValidateArgs};

const CONFIG_SNAPSHOT: &str = "config.toml";

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Stats(a) => stats(cli, a),
        Command::Finetune(a) => finetune(cli, a),
        Command::TrainControl(a) => control(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Validate(a) => validate(a),
        Command::Demo(a) => demo(cli, a),
    }
}

fn resolve(cli: &Cli, flags: Vec<String>) -> Result<PipelineConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("run.workers={w}"));
    }
    overrides.extend(flags);
    Ok(PipelineConfig::resolve(cli.config.as_deref(), &overrides)?)
}

fn taxonomy(cli: &Cli) -> Result<ClassTaxonomy> {
    Ok(match &cli.taxonomy {
        Some(p) => ClassTaxonomy::load(p)?,
        None => ClassTaxonomy::driving(),
    })
}

fn workers(cfg: &PipelineConfig) -> Option<usize> {
    (cfg.run.workers > 0).then_some(cfg.run.workers)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    Ok(out)
}

fn stats(cli: &Cli, a: &StatsArgs) -> Result<ExitCode> {
    let flags = a.temperature.map(|t| format!("rcg.temperature={t:?}")).into_iter().collect();
    let cfg = resolve(cli, flags)?;
    let tax = taxonomy(cli)?;
    let corpus = MaskCorpus::load(&a.masks, &tax)?;
    let stats = corpus.stats(&tax)?;
    let dist = sampling_probabilities::<f64>(&stats, cfg.rcg.temperature)?;
    let p = dist.probabilities();
    let sum: f64 = p.iter().sum();
    if a.json {
        let classes: Vec<_> = (0..tax.num_classes())
            .map(|c| {
                serde_json::json!({
                    "id": c,
                    "name": tax.name(c as u8),
                    "pixels": stats.pixel_counts[c],
                    "frequency": stats.frequencies[c],
                    "probability": p[c],
                })
            })
            .collect();
        let doc = serde_json::json!({
            "masks": corpus.len(),
            "labeled_pixels": stats.total_labeled,
            "temperature": cfg.rcg.temperature,
            "classes": classes,
            "probability_sum": sum,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "masks: {}  labeled pixels: {}  temperature: {}",
        corpus.len(),
        stats.total_labeled,
        cfg.rcg.temperature
    );
    println!("{:>3}  {:<14} {:>12} {:>10} {:>10}", "id", "class", "pixels", "freq", "P(c)");
    for c in 0..tax.num_classes() {
        println!(
            "{:>3}  {:<14} {:>12} {:>10.6} {:>10.6}",
            c,
            tax.name(c as u8).unwrap_or("?"),
            stats.pixel_counts[c],
            stats.frequencies[c],
            p[c]
        );
    }
    println!("{:>3}  {:<14} {:>12} {:>10.6} {:>10.6}", "", "total", stats.total_labeled, 1.0, sum);
    Ok(ExitCode::SUCCESS)
}

fn report_training(rec: &TrainingRunRecord) {
    let first = rec.interval_losses.first().copied().unwrap_or(f64::NAN);
    let last = rec.interval_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{}: {} iterations, loss {first:.6} -> {last:.6}, checkpoint {}",
        rec.run_id,
        rec.iterations_done,
        rec.checkpoint_id.as_deref().unwrap_or("none")
    );
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> Result<ExitCode> {
    let mut flags = Vec::new();
    if let Some(n) = a.iterations {
        flags.push(format!("finetune.iterations={n}"));
    }
    if let Some(lr) = a.lr {
        flags.push(format!("finetune.learning_rate={lr:?}"));
    }
    let cfg = resolve(cli, flags)?;
    let tax = taxonomy(cli)?;
    let images = list_pngs(&a.images)?
        .iter()
        .map(|p| Ok(read_rgb_png::<f64>(p)?))
        .collect::<Result<Vec<Image64>>>()?;
    let mut registry = ModelRegistry::open(&cli.registry)?;
    if !registry.contains(PRIOR_DENOISER) {
        info!("registering the built-in toy prior as {PRIOR_DENOISER}");
        bootstrap_toy_prior(&mut registry, &tax, cfg.diffusion.downscale)?;
    }
    let tc = cfg.finetune_config();
    let ctl = RunControl {
        work_dir: Some(cli.registry.join("work").join(&tc.output_id)),
        stop_after: None,
    };
    let rec = finetune_source(&images, &mut registry, &tc, &ctl)?;
    report_training(&rec);
    Ok(ExitCode::SUCCESS)
}

fn control(cli: &Cli, a: &TrainControlArgs) -> Result<ExitCode> {
    let mut flags = Vec::new();
    if let Some(n) = a.iterations {
        flags.push(format!("control.iterations={n}"));
    }
    if let Some(lr) = a.lr {
        flags.push(format!("control.learning_rate={lr:?}"));
    }
    let cfg = resolve(cli, flags)?;
    let tax = taxonomy(cli)?;
    let mut registry = ModelRegistry::open(&cli.registry)?;
    if !registry.contains(&a.base) {
        return Err(segsynth::Error::MissingCheckpoint(format!("{} (run finetune first)", a.base)).into());
    }
    let pairs = list_pngs(&a.masks)?
        .iter()
        .map(|mp| {
            let id = mp.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let ip = a.images.join(format!("{id}.png"));
            let mask = read_mask_png(mp)?;
            mask.validate(&tax)?;
            let image = read_rgb_png::<f64>(&ip).with_context(|| format!("no image for mask `{id}`"))?;
            Ok(TrainingPair { id, mask, image })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tc = cfg.control_config();
    tc.base_model_id = a.base.clone();
    tc.force = a.force;
    let ctl = RunControl {
        work_dir: Some(cli.registry.join("work").join(&tc.output_id)),
        stop_after: None,
    };
    let rec = train_control(&pairs, &tax, &mut registry, &tc, &ctl)?;
    report_training(&rec);
    Ok(ExitCode::SUCCESS)
}

/// Swapped model from the registry; an empty or absent registry falls back to
/// the built-in toy checkpoints.
fn inference_model(cli: &Cli, cfg: &PipelineConfig, tax: &ClassTaxonomy) -> Result<Model> {
    let populated = cli.registry.is_dir() && ModelRegistry::open(&cli.registry)?.ids().next().is_some();
    let registry = if populated {
        ModelRegistry::open(&cli.registry)?
    } else {
        warn!(
            "registry {} is empty, using the built-in toy checkpoints",
            cli.registry.display()
        );
        let mut r = ModelRegistry::in_memory();
        bootstrap_toy_registry(&mut r, tax, cfg.diffusion.downscale)?;
        r
    };
    Ok(build_inference_model(&registry, cfg.diffusion.steps, cfg.sampler())?)
}

fn run_generation(
    cfg: &PipelineConfig,
    gen: &GenerationConfig,
    tax: &ClassTaxonomy,
    masks: &Path,
    model: &Model,
    out: &Path,
) -> Result<ExitCode> {
    let corpus = MaskCorpus::load(masks, tax)?;
    let plan = plan_jobs(&corpus, tax, gen)?;
    let opts = RunOptions {
        workers: workers(cfg),
        stop_after: None,
    };
    let manifest = run_jobs(&plan, &corpus, tax, model, gen, out, &opts)?;
    write_atomic(&out.join(CONFIG_SNAPSHOT), cfg.to_toml_string().as_bytes())?;
    println!(
        "{}: {} of {} pairs written, {} failed",
        out.display(),
        manifest.completed,
        manifest.num_jobs,
        manifest.failed
    );
    if manifest.failed > 0 {
        eprintln!("some jobs failed; rerun the same command to retry them");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn synthetic_masks(cfg: &PipelineConfig, tax: &ClassTaxonomy, out: &Path, count: usize) -> Result<PathBuf> {
    let size = cfg.mrlf_config().output_size(cfg.diffusion.downscale);
    let corpus = write_demo_corpus(&out.join("conditioning"), count, size, cfg.run.seed, tax)?;
    Ok(corpus.mask_dir)
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<ExitCode> {
    let mut flags = Vec::new();
    if let Some(n) = a.n {
        flags.push(format!("generation.n={n}"));
    }
    if let Some(b) = &a.backend {
        flags.push(format!("diffusion.backend={}", serde_json::to_string(b)?));
    }
    if let Some(t) = a.temperature {
        flags.push(format!("rcg.temperature={t:?}"));
    }
    if a.no_rcg {
        flags.push("rcg.enabled=false".into());
    }
    let cfg = resolve(cli, flags)?;
    let tax = taxonomy(cli)?;
    let model = inference_model(cli, &cfg, &tax)?;
    let masks = match &a.masks {
        Some(m) => m.clone(),
        None => synthetic_masks(&cfg, &tax, &a.out, a.corpus_size)?,
    };
    run_generation(&cfg, &cfg.generation_config(), &tax, &masks, &model, &a.out)
}

fn validate(a: &ValidateArgs) -> Result<ExitCode> {
    let report = validate_dataset(&a.dataset)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn demo(cli: &Cli, a: &DemoArgs) -> Result<ExitCode> {
    let cfg = resolve(cli, vec!["generation.n=1".into()])?;
    let tax = taxonomy(cli)?;
    let mut registry = ModelRegistry::in_memory();
    bootstrap_toy_registry(&mut registry, &tax, cfg.diffusion.downscale)?;
    let model = build_inference_model(&registry, cfg.diffusion.steps, cfg.sampler())?;
    let masks = synthetic_masks(&cfg, &tax, &a.out, 1)?;
    run_generation(&cfg, &cfg.generation_config(), &tax, &masks, &model, &a.out)
}
