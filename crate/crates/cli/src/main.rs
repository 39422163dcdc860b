mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use segsynth::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "segsynth", version, about = "Synthesize pixel-aligned segmentation datasets with label-conditioned latent diffusion")]
pub struct Cli {
    /// TOML config file with `[section]` tables.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,

    /// Seed for every random draw (run.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (run.workers); defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Model registry directory.
    #[arg(long, global = true, env = "SEGSYNTH_REGISTRY", default_value = "segsynth-registry")]
    pub registry: PathBuf,

    /// Class taxonomy TOML; defaults to the 19-class driving taxonomy.
    #[arg(long, global = true, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,

    /// More log output; repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class frequencies and rare-class sampling probabilities of a mask corpus.
    Stats(StatsArgs),
    /// Fine-tune the prior denoiser on source-domain images.
    Finetune(FinetuneArgs),
    /// Train the control adapter against the fine-tuned denoiser.
    TrainControl(TrainControlArgs),
    /// Plan and run a generation job set, writing images, labels and a manifest.
    Generate(GenerateArgs),
    /// Check a generated dataset against its manifest.
    Validate(ValidateArgs),
    /// Generate one image with the built-in toy backend.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory of 8-bit label PNGs.
    #[arg(long)]
    pub masks: PathBuf,
    /// Softmax temperature (rcg.temperature).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Directory of source-domain RGB PNGs.
    #[arg(long)]
    pub images: PathBuf,
    /// finetune.iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// finetune.learning_rate
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainControlArgs {
    /// Directory of 8-bit label PNGs.
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory of RGB PNGs named like the masks.
    #[arg(long)]
    pub images: PathBuf,
    /// control.iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// control.learning_rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Base denoiser the adapter is trained against.
    #[arg(long, default_value = segsynth::diffusion::SOURCE_DENOISER)]
    pub base: String,
    /// Allow a base other than the fine-tuned denoiser; recorded in the checkpoint.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Conditioning masks; a seeded synthetic street corpus is written when omitted.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// generation.n
    #[arg(long)]
    pub n: Option<usize>,
    /// diffusion.backend
    #[arg(long)]
    pub backend: Option<String>,
    /// rcg.temperature
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Select masks uniformly (rcg.enabled = false).
    #[arg(long)]
    pub no_rcg: bool,
    /// Size of the synthetic corpus used without --masks.
    #[arg(long, default_value_t = 32)]
    pub corpus_size: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Dataset directory containing manifest.json.
    pub dataset: PathBuf,
    /// Emit the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Output directory.
    #[arg(long, default_value = "segsynth-demo")]
    pub out: PathBuf,
}

const SUBCOMMAND_SECTIONS: &[(&str, &[&str])] = &[
    ("stats", &["rcg"]),
    ("finetune", &["run", "diffusion", "rcg", "finetune"]),
    ("train-control", &["run", "diffusion", "rcg", "control"]),
    ("generate", &["run", "diffusion", "rcg", "prompt", "mrlf", "generation"]),
    ("validate", &[]),
    ("demo", &["run", "diffusion", "prompt", "mrlf"]),
];

fn keys_help(sections: &[&str]) -> String {
    let keys = PipelineConfig::keys(sections);
    if keys.is_empty() {
        return "Reads no config keys.".to_string();
    }
    let width = keys.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (set with --config FILE or --set section.key=value):\n");
    for k in keys {
        out.push_str(&format!("  {:width$}  {} [default: {}]\n", k.key, k.help, k.default));
    }
    out
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, sections) in SUBCOMMAND_SECTIONS {
        let help = keys_help(sections);
        cmd = cmd.mut_subcommand(*name, |c| c.after_help(help));
    }
    cmd
}

fn main() -> ExitCode {
    let cli = match command().try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<segsynth::Error>() {
                Some(segsynth::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
