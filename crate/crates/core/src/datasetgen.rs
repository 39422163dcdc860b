//! Synthetic dataset generation: mask selection, prompt assembly, two-pass
//! generation, file emission, manifest and validation.
//!
//! Output layout under the dataset root:
//!
//! ```text
//! images/<job_id>.png   generated RGB image
//! labels/<job_id>.png   conditioning mask (8-bit class ids)
//! jobs/<job_id>.json    per-job completion marker
//! manifest.json         deterministic manifest
//! run_info.json         wall-clock metadata of the last run
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{derive_seed, ControlledModel, InferenceModelDescriptor};
use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::label::{
    compute_class_frequencies, decode_mask_png, encode_mask_png, encode_rgb_png, png_dimensions,
    read_mask_png, ClassStats, ClassTaxonomy, SemanticMask,
};
use crate::mrlf::{mrlf_generate, MrlfConfig};
use crate::prompting::{sample_style, tile_prompt, StyleCatalog, StyleQualifier};
use crate::rcg::{select_generation_masks, select_uniform_masks, sampling_probabilities, MaskIndex};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const SCHEMA_VERSION: u32 = 1;

const MASK_SALT: u64 = 0x6d61_736b;
const STYLE_SALT: u64 = 0x7374_796c;

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub id: String,
    /// Source file, when the mask came from disk.
    pub path: Option<PathBuf>,
    pub mask: SemanticMask,
}

/// Conditioning masks available for generation, ordered by id.
#[derive(Debug, Clone)]
pub struct MaskCorpus {
    entries: Vec<CorpusEntry>,
}

impl MaskCorpus {
    /// Every `*.png` directly under `dir`, validated against `taxonomy`.
    pub fn load(dir: &Path, taxonomy: &ClassTaxonomy) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::file(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let entries = paths
            .into_iter()
            .map(|path| {
                let mask = read_mask_png(&path)?;
                mask.validate(taxonomy)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(CorpusEntry {
                    id,
                    path: Some(path),
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn from_masks(masks: Vec<(String, SemanticMask)>) -> Result<Self> {
        Self::new(
            masks
                .into_iter()
                .map(|(id, mask)| CorpusEntry { id, path: None, mask })
                .collect(),
        )
    }

    fn new(mut entries: Vec<CorpusEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("mask corpus"));
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.clone())) {
            return Err(Error::Dataset(format!("duplicate mask id `{}`", dup.id)));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, taxonomy: &ClassTaxonomy) -> Result<MaskIndex> {
        MaskIndex::new(
            self.entries
                .iter()
                .map(|e| (e.id.clone(), e.mask.class_set()))
                .collect(),
            taxonomy.num_classes(),
        )
    }

    pub fn stats(&self, taxonomy: &ClassTaxonomy) -> Result<ClassStats> {
        let masks: Vec<SemanticMask> = self.entries.iter().map(|e| e.mask.clone()).collect();
        compute_class_frequencies(&masks, taxonomy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Number of images to generate.
    pub n: usize,
    pub rcg_enabled: bool,
    pub temperature: f64,
    /// Fraction of jobs that get a style qualifier.
    pub mix_ratio: f64,
    pub styles: Vec<String>,
    pub seed: u64,
    /// Extra attempts after a failed job.
    pub retries: u32,
    pub mrlf: MrlfConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n: 6000,
            rcg_enabled: true,
            temperature: crate::rcg::DEFAULT_TEMPERATURE,
            mix_ratio: 0.5,
            styles: StyleCatalog::adverse_weather()
                .tokens()
                .into_iter()
                .map(str::to_string)
                .collect(),
            seed: 0,
            retries: 2,
            mrlf: MrlfConfig::default(),
        }
    }
}

impl GenerationConfig {
    /// Catalog entries for `styles`; known tokens keep their built-in phrasing.
    pub fn catalog(&self) -> Result<StyleCatalog> {
        let builtin = StyleCatalog::adverse_weather();
        StyleCatalog::new(
            self.styles
                .iter()
                .map(|t| builtin.get(t).cloned().unwrap_or_else(|| StyleQualifier::weather(t)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub job_id: String,
    pub mask_id: String,
    pub mask_index: usize,
    pub seed: u64,
    pub style: Option<String>,
    pub prompt: String,
}

/// Chooses masks (rare-class weighted or uniform) and styles for `config.n`
/// jobs. Each job gets its own seed derived from the run seed.
pub fn plan_jobs(
    corpus: &MaskCorpus,
    taxonomy: &ClassTaxonomy,
    config: &GenerationConfig,
) -> Result<Vec<GenerationJob>> {
    let index = corpus.index(taxonomy)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, MASK_SALT));
    let picks = if config.rcg_enabled {
        let dist = sampling_probabilities::<f64>(&corpus.stats(taxonomy)?, config.temperature)?;
        select_generation_masks(&index, &dist, config.n, &mut mask_rng)?
    } else {
        select_uniform_masks(&index, config.n, &mut mask_rng)?
    };
    let catalog = config.catalog()?;
    let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STYLE_SALT));
    let width = config.n.to_string().len().max(6);
    picks
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let entry = &corpus.entries[m];
            let style = sample_style(&mut style_rng, config.mix_ratio, &catalog)?;
            let prompt = tile_prompt(&entry.mask.class_set(), taxonomy, style)?;
            Ok(GenerationJob {
                job_id: format!("{i:0width$}"),
                mask_id: entry.id.clone(),
                mask_index: m,
                seed: derive_seed(config.seed, i as u64),
                style: style.map(|s| s.token.clone()),
                prompt: prompt.rendered,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub mask_id: String,
    pub seed: u64,
    pub style: Option<String>,
    pub prompt: String,
    pub status: JobStatus,
    pub attempts: u32,
    pub image: Option<String>,
    pub label: Option<String>,
    pub image_sha256: Option<String>,
    pub label_sha256: Option<String>,
    pub height: usize,
    pub width: usize,
    pub class_pixel_counts: Vec<u64>,
    pub error: Option<String>,
}

impl JobRecord {
    fn pending(job: &GenerationJob) -> Self {
        Self {
            job_id: job.job_id.clone(),
            mask_id: job.mask_id.clone(),
            seed: job.seed,
            style: job.style.clone(),
            prompt: job.prompt.clone(),
            status: JobStatus::Pending,
            attempts: 0,
            image: None,
            label: None,
            image_sha256: None,
            label_sha256: None,
            height: 0,
            width: 0,
            class_pixel_counts: Vec::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: GenerationConfig,
    pub taxonomy: ClassTaxonomy,
    pub taxonomy_hash: String,
    pub model: InferenceModelDescriptor,
    pub num_jobs: usize,
    pub completed: usize,
    pub failed: usize,
    /// Labeled pixels per class over all completed labels.
    pub class_pixel_counts: Vec<u64>,
    pub jobs: Vec<JobRecord>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        let manifest: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: corrupt manifest: {e}", path.display())))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    pub fn is_complete(&self) -> bool {
        self.completed == self.num_jobs
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Execute at most this many pending jobs, leaving the rest pending.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RunInfo {
    started_unix: u64,
    finished_unix: u64,
    workers: usize,
    executed: usize,
    reused: usize,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn marker_path(root: &Path, job_id: &str) -> PathBuf {
    root.join("jobs").join(format!("{job_id}.json"))
}

fn class_counts(mask: &SemanticMask, taxonomy: &ClassTaxonomy) -> Vec<u64> {
    let hist = mask.histogram();
    (0..taxonomy.num_classes()).map(|c| hist[c]).collect()
}

/// A finished job whose marker and files still agree is reused on resume.
fn reusable(root: &Path, job: &GenerationJob) -> Option<JobRecord> {
    let bytes = std::fs::read(marker_path(root, &job.job_id)).ok()?;
    let rec: JobRecord = serde_json::from_slice(&bytes).ok()?;
    if rec.status != JobStatus::Done || rec.seed != job.seed || rec.mask_id != job.mask_id {
        return None;
    }
    let intact = |rel: &Option<String>, sum: &Option<String>| match (rel, sum) {
        (Some(rel), Some(sum)) => std::fs::read(root.join(rel)).is_ok_and(|b| &sha256_hex(&b) == sum),
        _ => false,
    };
    (intact(&rec.image, &rec.image_sha256) && intact(&rec.label, &rec.label_sha256)).then_some(rec)
}

fn label_bytes(entry: &CorpusEntry, label: &SemanticMask) -> Result<Vec<u8>> {
    if let Some(path) = &entry.path {
        if (entry.mask.height(), entry.mask.width()) == (label.height(), label.width()) {
            return std::fs::read(path).map_err(|e| Error::file(path, e));
        }
    }
    encode_mask_png(label)
}

fn generate_once<S: Scalar>(
    root: &Path,
    job: &GenerationJob,
    entry: &CorpusEntry,
    taxonomy: &ClassTaxonomy,
    catalog: &StyleCatalog,
    model: &ControlledModel<S>,
    config: &GenerationConfig,
) -> Result<JobRecord> {
    let style = match &job.style {
        Some(t) => Some(
            catalog
                .get(t)
                .ok_or_else(|| Error::Config(format!("style `{t}` not in catalog")))?,
        ),
        None => None,
    };
    let mrlf = MrlfConfig {
        seed: job.seed,
        ..config.mrlf.clone()
    };
    let out = mrlf_generate(&entry.mask, taxonomy, style, model, &mrlf)?;
    let (h, w) = (out.image.height(), out.image.width());
    let label = if (entry.mask.height(), entry.mask.width()) == (h, w) {
        entry.mask.clone()
    } else {
        entry.mask.resize_nearest(h, w)?
    };
    let image_rel = format!("images/{}.png", job.job_id);
    let label_rel = format!("labels/{}.png", job.job_id);
    let image_png = encode_rgb_png(&out.image)?;
    let label_png = label_bytes(entry, &label)?;
    write_atomic(&root.join(&image_rel), &image_png)?;
    write_atomic(&root.join(&label_rel), &label_png)?;
    Ok(JobRecord {
        status: JobStatus::Done,
        image: Some(image_rel),
        label: Some(label_rel),
        image_sha256: Some(sha256_hex(&image_png)),
        label_sha256: Some(sha256_hex(&label_png)),
        height: h,
        width: w,
        class_pixel_counts: class_counts(&label, taxonomy),
        ..JobRecord::pending(job)
    })
}

#[allow(clippy::too_many_arguments)]
fn execute<S: Scalar>(
    root: &Path,
    job: &GenerationJob,
    corpus: &MaskCorpus,
    taxonomy: &ClassTaxonomy,
    catalog: &StyleCatalog,
    model: &ControlledModel<S>,
    config: &GenerationConfig,
) -> Result<JobRecord> {
    let entry = corpus
        .entries
        .get(job.mask_index)
        .filter(|e| e.id == job.mask_id)
        .ok_or_else(|| Error::Dataset(format!("job {} refers to unknown mask `{}`", job.job_id, job.mask_id)))?;
    let mut last_error = String::new();
    let attempts = 1 + config.retries;
    for attempt in 1..=attempts {
        match generate_once(root, job, entry, taxonomy, catalog, model, config) {
            Ok(rec) => {
                let rec = JobRecord { attempts: attempt, ..rec };
                write_atomic(&marker_path(root, &job.job_id), &serde_json::to_vec_pretty(&rec)?)?;
                return Ok(rec);
            }
            Err(e) => {
                warn!("job {} attempt {attempt}/{attempts} failed: {e}", job.job_id);
                last_error = e.to_string();
            }
        }
    }
    let rec = JobRecord {
        status: JobStatus::Failed,
        attempts,
        error: Some(last_error),
        ..JobRecord::pending(job)
    };
    write_atomic(&marker_path(root, &job.job_id), &serde_json::to_vec_pretty(&rec)?)?;
    Ok(rec)
}

/// Runs every job not already completed under `root` and writes the manifest.
/// Failed jobs are recorded with their cause; the manifest stays valid.
#[allow(clippy::too_many_arguments)]
pub fn run_jobs<S: Scalar>(
    plan: &[GenerationJob],
    corpus: &MaskCorpus,
    taxonomy: &ClassTaxonomy,
    model: &ControlledModel<S>,
    config: &GenerationConfig,
    root: &Path,
    options: &RunOptions,
) -> Result<DatasetManifest> {
    let started = now_unix();
    for sub in ["images", "labels", "jobs"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
    }
    let catalog = config.catalog()?;
    let mut records: Vec<Option<JobRecord>> = plan.iter().map(|j| reusable(root, j)).collect();
    let reused = records.iter().flatten().count();
    let budget = options.stop_after.unwrap_or(usize::MAX);
    let todo: Vec<usize> = (0..plan.len())
        .filter(|&i| records[i].is_none())
        .take(budget)
        .collect();
    info!("{} jobs: {reused} already done, running {}", plan.len(), todo.len());

    let run = || -> Result<Vec<(usize, JobRecord)>> {
        todo.par_iter()
            .map(|&i| Ok((i, execute(root, &plan[i], corpus, taxonomy, &catalog, model, config)?)))
            .collect()
    };
    let (done, workers) = match options.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Backend(format!("cannot start worker pool: {e}")))?;
            (pool.install(run)?, n.max(1))
        }
        None => (run()?, rayon::current_num_threads()),
    };
    let executed = done.len();
    for (i, rec) in done {
        records[i] = Some(rec);
    }
    let jobs: Vec<JobRecord> = records
        .into_iter()
        .zip(plan)
        .map(|(r, j)| r.unwrap_or_else(|| JobRecord::pending(j)))
        .collect();

    let mut totals = vec![0u64; taxonomy.num_classes()];
    for rec in jobs.iter().filter(|r| r.status == JobStatus::Done) {
        for (t, c) in totals.iter_mut().zip(&rec.class_pixel_counts) {
            *t += c;
        }
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        taxonomy: taxonomy.clone(),
        taxonomy_hash: taxonomy.content_hash(),
        model: model.descriptor.clone(),
        num_jobs: plan.len(),
        completed: jobs.iter().filter(|r| r.status == JobStatus::Done).count(),
        failed: jobs.iter().filter(|r| r.status == JobStatus::Failed).count(),
        class_pixel_counts: totals,
        jobs,
    };
    write_atomic(&root.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    let run_info = RunInfo {
        started_unix: started,
        finished_unix: now_unix(),
        workers,
        executed,
        reused,
    };
    write_atomic(&root.join(RUN_INFO_FILE), &serde_json::to_vec_pretty(&run_info)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Incomplete,
    MissingFile,
    Unreadable,
    ChecksumMismatch,
    DimensionMismatch,
    OutOfTaxonomy,
    ClassCountMismatch,
    TaxonomyMismatch,
    ManifestInconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub job_id: Option<String>,
    pub kind: IssueKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub jobs_checked: usize,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    /// Jobs named by at least one issue.
    pub fn failing_jobs(&self) -> BTreeSet<&str> {
        self.issues.iter().filter_map(|i| i.job_id.as_deref()).collect()
    }

    fn push(&mut self, job: Option<&str>, kind: IssueKind, detail: impl Into<String>) {
        self.issues.push(ValidationIssue {
            job_id: job.map(str::to_string),
            kind,
            detail: detail.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "checked {} jobs, {} issues", self.jobs_checked, self.issues.len())?;
        for i in &self.issues {
            writeln!(
                f,
                "  [{}] {:?}: {}",
                i.job_id.as_deref().unwrap_or("dataset"),
                i.kind,
                i.detail
            )?;
        }
        Ok(())
    }
}

fn check_file(
    root: &Path,
    report: &mut ValidationReport,
    job: &str,
    rel: &Option<String>,
    sum: &Option<String>,
) -> Option<PathBuf> {
    let Some(rel) = rel else {
        report.push(Some(job), IssueKind::ManifestInconsistent, "done job without file path");
        return None;
    };
    let path = root.join(rel);
    match std::fs::read(&path) {
        Err(_) => {
            report.push(Some(job), IssueKind::MissingFile, format!("{rel} is missing"));
            None
        }
        Ok(bytes) => {
            if sum.as_deref() != Some(sha256_hex(&bytes).as_str()) {
                report.push(Some(job), IssueKind::ChecksumMismatch, format!("{rel} checksum differs"));
            }
            Some(path)
        }
    }
}

/// Re-checks a dataset against its manifest. A missing or corrupt manifest is
/// an error; everything else is reported per item.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let manifest = DatasetManifest::read(root)?;
    let taxonomy = ClassTaxonomy::new(manifest.taxonomy.classes().to_vec(), manifest.taxonomy.ignore_id())
        .map_err(|e| Error::Dataset(format!("manifest taxonomy: {e}")))?;
    let mut report = ValidationReport::default();
    if taxonomy.content_hash() != manifest.taxonomy_hash {
        report.push(None, IssueKind::TaxonomyMismatch, "taxonomy hash does not match its content");
    }
    if manifest.num_jobs != manifest.jobs.len() {
        report.push(
            None,
            IssueKind::ManifestInconsistent,
            format!("num_jobs = {} but {} records", manifest.num_jobs, manifest.jobs.len()),
        );
    }
    let mut totals = vec![0u64; taxonomy.num_classes()];
    for rec in &manifest.jobs {
        report.jobs_checked += 1;
        let id = rec.job_id.as_str();
        if rec.status != JobStatus::Done {
            let why = rec.error.as_deref().unwrap_or("not run");
            report.push(Some(id), IssueKind::Incomplete, format!("status {:?}: {why}", rec.status));
            continue;
        }
        let image = check_file(root, &mut report, id, &rec.image, &rec.image_sha256);
        let label = check_file(root, &mut report, id, &rec.label, &rec.label_sha256);
        let image_dims = match image.map(|p| png_dimensions(&p)) {
            Some(Ok(d)) => Some(d),
            Some(Err(e)) => {
                report.push(Some(id), IssueKind::Unreadable, format!("image: {e}"));
                None
            }
            None => None,
        };
        let label_mask = match label.map(|p| std::fs::read(&p).map_err(|e| Error::file(&p, e)).and_then(|b| decode_mask_png(&b))) {
            Some(Ok(m)) => Some(m),
            Some(Err(e)) => {
                report.push(Some(id), IssueKind::Unreadable, format!("label: {e}"));
                None
            }
            None => None,
        };
        if let Some((h, w)) = image_dims {
            if (h, w) != (rec.height, rec.width) {
                report.push(Some(id), IssueKind::DimensionMismatch, format!("image {h}x{w}, manifest {}x{}", rec.height, rec.width));
            }
        }
        if let Some(mask) = label_mask {
            let dims = (mask.height(), mask.width());
            if let Some(img) = image_dims {
                if img != dims {
                    report.push(
                        Some(id),
                        IssueKind::DimensionMismatch,
                        format!("image {}x{} vs label {}x{}", img.0, img.1, dims.0, dims.1),
                    );
                }
            }
            if let Err(e) = mask.validate(&taxonomy) {
                report.push(Some(id), IssueKind::OutOfTaxonomy, e.to_string());
            }
            let counts = class_counts(&mask, &taxonomy);
            if counts != rec.class_pixel_counts {
                report.push(Some(id), IssueKind::ClassCountMismatch, "label class counts differ from the manifest");
            }
            for (t, c) in totals.iter_mut().zip(&counts) {
                *t += c;
            }
        }
    }
    let done = manifest.jobs.iter().filter(|r| r.status == JobStatus::Done).count();
    if done != manifest.completed {
        report.push(None, IssueKind::ManifestInconsistent, format!("completed = {} but {done} done records", manifest.completed));
    }
    if report.issues.iter().all(|i| i.kind != IssueKind::MissingFile && i.kind != IssueKind::Unreadable)
        && totals != manifest.class_pixel_counts
    {
        report.push(None, IssueKind::ClassCountMismatch, "dataset class totals differ from the manifest");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::toy::{toy_backend, TargetField};
    use crate::diffusion::{Denoiser, NoiseSchedule, SamplerConfig};
    use crate::label::write_mask_png;
    use crate::prompting::PromptSpec;
    use crate::tensor::LatentCanvas;

    fn tiny() -> GenerationConfig {
        GenerationConfig {
            n: 6,
            seed: 4,
            mrlf: MrlfConfig {
                stride: 2,
                steps: 4,
                base_latent_h: 4,
                base_latent_w: 4,
                ..MrlfConfig::default()
            },
            ..GenerationConfig::default()
        }
    }

    fn model(tax: &ClassTaxonomy) -> ControlledModel<f32> {
        toy_backend(&TargetField::palette(tax), 2, NoiseSchedule::linear(4, Default::default()).unwrap())
            .unwrap()
            .into_model(SamplerConfig::default())
    }

    fn corpus_on_disk(dir: &Path) -> MaskCorpus {
        let tax = ClassTaxonomy::driving();
        for (i, c) in [0u8, 13, 16].iter().enumerate() {
            let m = SemanticMask::from_fn(8, 8, |y, _| if y < 4 { 10 } else { *c }).unwrap();
            write_mask_png(&dir.join(format!("m{i}.png")), &m).unwrap();
        }
        MaskCorpus::load(dir, &tax).unwrap()
    }

    #[test]
    fn plan_is_seeded() {
        let tax = ClassTaxonomy::driving();
        let dir = tempfile::tempdir().unwrap();
        let corpus = corpus_on_disk(dir.path());
        let a = plan_jobs(&corpus, &tax, &tiny()).unwrap();
        assert_eq!(a, plan_jobs(&corpus, &tax, &tiny()).unwrap());
        assert_eq!(a.len(), 6);
        let seeds: BTreeSet<u64> = a.iter().map(|j| j.seed).collect();
        assert_eq!(seeds.len(), 6);
        let other = plan_jobs(&corpus, &tax, &GenerationConfig { seed: 5, ..tiny() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn generate_validate_and_resume() {
        let tax = ClassTaxonomy::driving();
        let src = tempfile::tempdir().unwrap();
        let corpus = corpus_on_disk(src.path());
        let cfg = tiny();
        let plan = plan_jobs(&corpus, &tax, &cfg).unwrap();
        let m = model(&tax);

        let full = tempfile::tempdir().unwrap();
        let manifest = run_jobs(&plan, &corpus, &tax, &m, &cfg, full.path(), &RunOptions::default()).unwrap();
        assert!(manifest.is_complete());
        assert!(validate_dataset(full.path()).unwrap().is_clean());
        for rec in &manifest.jobs {
            let label = std::fs::read(full.path().join(rec.label.as_ref().unwrap())).unwrap();
            let source = std::fs::read(src.path().join(format!("{}.png", rec.mask_id))).unwrap();
            assert_eq!(label, source);
        }

        let part = tempfile::tempdir().unwrap();
        let opts = RunOptions { workers: Some(2), stop_after: Some(2) };
        let partial = run_jobs(&plan, &corpus, &tax, &m, &cfg, part.path(), &opts).unwrap();
        assert_eq!(partial.completed, 2);
        assert!(!validate_dataset(part.path()).unwrap().is_clean());
        let marker = marker_path(part.path(), &plan[0].job_id);
        let before = std::fs::metadata(&marker).unwrap().modified().unwrap();
        run_jobs(&plan, &corpus, &tax, &m, &cfg, part.path(), &RunOptions::default()).unwrap();
        assert_eq!(std::fs::metadata(&marker).unwrap().modified().unwrap(), before);
        assert_eq!(
            std::fs::read(part.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(full.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn validation_names_broken_jobs() {
        let tax = ClassTaxonomy::driving();
        let src = tempfile::tempdir().unwrap();
        let corpus = corpus_on_disk(src.path());
        let cfg = tiny();
        let plan = plan_jobs(&corpus, &tax, &cfg).unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = run_jobs(&plan, &corpus, &tax, &model(&tax), &cfg, out.path(), &RunOptions::default()).unwrap();

        let victim = &manifest.jobs[2];
        std::fs::remove_file(out.path().join(victim.image.as_ref().unwrap())).unwrap();
        let report = validate_dataset(out.path()).unwrap();
        assert_eq!(report.failing_jobs().into_iter().collect::<Vec<_>>(), vec![victim.job_id.as_str()]);

        let edited = &manifest.jobs[4];
        let bad = SemanticMask::filled(8, 8, 19 + 5).unwrap();
        write_mask_png(&out.path().join(edited.label.as_ref().unwrap()), &bad).unwrap();
        let report = validate_dataset(out.path()).unwrap();
        assert!(report
            .issues
            .iter()
            .any(|i| i.kind == IssueKind::OutOfTaxonomy && i.job_id.as_deref() == Some(edited.job_id.as_str())));

        std::fs::write(out.path().join(MANIFEST_FILE), b"{not json").unwrap();
        assert!(validate_dataset(out.path()).is_err());
    }

    struct Broken;

    impl Denoiser<f32> for Broken {
        fn model_id(&self) -> &str {
            "broken"
        }

        fn predict_noise(
            &self,
            _: &LatentCanvas<f32>,
            _: usize,
            _: &NoiseSchedule<f32>,
            _: &PromptSpec,
            _: Option<&crate::diffusion::ControlFeatures<f32>>,
        ) -> Result<LatentCanvas<f32>> {
            Err(Error::Backend("device lost".into()))
        }
    }

    #[test]
    fn backend_failure_is_recorded() {
        let tax = ClassTaxonomy::driving();
        let src = tempfile::tempdir().unwrap();
        let corpus = corpus_on_disk(src.path());
        let cfg = GenerationConfig { n: 2, ..tiny() };
        let plan = plan_jobs(&corpus, &tax, &cfg).unwrap();
        let mut m = model(&tax);
        m.denoiser = Box::new(Broken);
        let out = tempfile::tempdir().unwrap();
        let manifest = run_jobs(&plan, &corpus, &tax, &m, &cfg, out.path(), &RunOptions::default()).unwrap();
        assert_eq!(manifest.failed, 2);
        assert!(manifest.jobs.iter().all(|j| j.attempts == 3 && j.error.as_deref().unwrap().contains("device lost")));
        let report = validate_dataset(out.path()).unwrap();
        assert_eq!(report.failing_jobs().len(), 2);
    }

    #[test]
    fn rcg_enriches_rare_class() {
        let tax = ClassTaxonomy::driving();
        let mut masks = Vec::new();
        for i in 0..40 {
            let rare = i == 0;
            masks.push((
                format!("m{i:02}"),
                SemanticMask::from_fn(8, 8, |y, x| if rare && y > 5 && x > 5 { 16 } else if y < 4 { 10 } else { 0 }).unwrap(),
            ));
        }
        let corpus = MaskCorpus::from_masks(masks).unwrap();
        let share = |rcg: bool| {
            let cfg = GenerationConfig { n: 400, rcg_enabled: rcg, ..tiny() };
            let plan = plan_jobs(&corpus, &tax, &cfg).unwrap();
            let (rare, total) = plan.iter().fold((0u64, 0u64), |(r, t), j| {
                let h = corpus.entries()[j.mask_index].mask.histogram();
                (r + h[16], t + 64)
            });
            rare as f64 / total as f64
        };
        assert!(share(true) > share(false));
    }
}
