//! Command-line front end: `simulate`, `train`, `generate`, `sweep`, `evaluate`.
//!
//! Settings come from an optional TOML file (`--config`) and are overridden by
//! flags. Exit codes: 0 success, 2 invalid input, 3 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    init_denoiser, load_checkpoint, train, DenoiserConfig, PatchSource,
    TrainOptions, TrainState, Trainer,
};
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::io;
use crate::metrics::{instance_iou, rank_sum_test, sweep, SweepConfig, SweepReport};
use crate::nn::AdamConfig;
use crate::pipeline::{generate_dataset, simulate_mask, DatasetRequest, GenerationConfig};
use crate::plot;
use crate::rng::{self, derive_seed, stream};
use crate::sketch::{blur_sketch, mask_to_sketch, SimParams, SketchStyle};
use crate::tensor::{ImageTensor, LabelMask, ValueRange};
use crate::toy::{minmax_to_model, ImageCorpus, ToyParams};
use crate::Error;

/// Environment variable naming the toy-corpus cache directory.
pub const CACHE_ENV: &str = "S2M_CACHE";

#[derive(Debug, Parser)]
#[command(name = "s2m", version, about = "Annotated synthetic microscopy data from diffusion models")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate instance masks and their sketches.
    Simulate(SimulateArgs),
    /// Train a denoiser on TIFF images or the built-in toy corpus.
    Train(TrainArgs),
    /// Generate an image/mask dataset from a trained checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a (t_start, sigma) grid against reference image/mask pairs.
    Sweep(SweepArgs),
    /// Score predicted masks against truth masks; optional rank-sum test.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Field shape, e.g. `64x64` or `16x64x64`.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<Shape>,
    /// Blur applied to the written sketches.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train on the built-in procedural corpus (cached under $S2M_CACHE).
    #[arg(long, conflicts_with = "images")]
    pub toy_corpus: bool,
    /// Directory of training TIFF images.
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; its network and seed are kept.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub time_embed_dim: Option<usize>,
    #[arg(long, value_parser = parse_shape)]
    pub patch: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t_start: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub style: Option<String>,
    /// Export unclamped intensities.
    #[arg(long)]
    pub no_clamp: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub t_starts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Number of toy-corpus reference crops (ignored with --ref-images).
    #[arg(long)]
    pub references: Option<usize>,
    #[arg(long, value_name = "DIR", requires = "ref_masks")]
    pub ref_images: Option<PathBuf>,
    #[arg(long, value_name = "DIR", requires = "ref_images")]
    pub ref_masks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "DIR", requires = "truth")]
    pub pred: Option<PathBuf>,
    #[arg(long, value_name = "DIR", requires = "pred")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Score list (numbers separated by whitespace or commas).
    #[arg(long, value_name = "FILE", requires = "scores_b")]
    pub scores_a: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "scores_a")]
    pub scores_b: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Shape(pub Vec<usize>);

fn parse_shape(s: &str) -> Result<Shape, String> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad dimension `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if !(2..=3).contains(&dims.len()) || dims.contains(&0) {
        return Err(format!("expected 2 or 3 positive dimensions, got `{s}`"));
    }
    Ok(Shape(dims))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub log_level: Option<String>,
    pub schedule: ScheduleParams,
    pub sim: SimParams,
    pub denoiser: DenoiserConfig,
    pub simulate: SimulateSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub sweep: SweepSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub count: usize,
    pub style: SketchStyle,
    pub sigma: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            count: 10,
            style: SketchStyle::Nuclei,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub toy_corpus: bool,
    pub images: Option<PathBuf>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: u64,
    pub toy: ToyParams,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            toy_corpus: false,
            images: None,
            steps: 20_000,
            batch_size: 8,
            lr: AdamConfig::default().lr,
            checkpoint_every: 1000,
            toy: ToyParams::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub checkpoint: Option<PathBuf>,
    pub n: usize,
    pub style: SketchStyle,
    pub t_start: usize,
    pub sigma: f64,
    pub clamp_output: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            checkpoint: None,
            n: 200,
            style: SketchStyle::Nuclei,
            t_start: g.t_start,
            sigma: g.sigma,
            clamp_output: g.clamp_output,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub checkpoint: Option<PathBuf>,
    pub t_starts: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub references: usize,
    pub ref_images: Option<PathBuf>,
    pub ref_masks: Option<PathBuf>,
    pub style: SketchStyle,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        Self {
            checkpoint: None,
            t_starts: d.t_starts,
            sigmas: d.sigmas,
            seeds: d.seeds,
            references: 4,
            ref_images: None,
            ref_masks: None,
            style: d.style,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub threshold: f64,
    pub scores_a: Option<PathBuf>,
    pub scores_b: Option<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            pred: None,
            truth: None,
            threshold: 0.5,
            scores_a: None,
            scores_b: None,
        }
    }
}

/// Bad user input; reported with exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("invalid input: {0}")]
pub struct Invalid(pub String);

/// Exit status for a failed command: 2 for bad input, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let user = err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some() || e.downcast_ref::<Error>().is_some_and(Error::is_user_error)
    });
    if user {
        2
    } else {
        3
    }
}

type CliResult<T> = anyhow::Result<T>;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Global settings after merging file and flags.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("s2m: {e:#}");
            exit_code(&e)
        }
    }
}

fn init_logging(level: &str) -> CliResult<()> {
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| invalid(format!("unknown log level `{level}`")))?;
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init();
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let level = cli.log_level.clone().or(file.log_level.clone()).unwrap_or_else(|| "info".into());
    init_logging(&level)?;
    let globals = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("s2m-out")),
        jobs: cli.jobs.or(file.jobs).unwrap_or(0),
    };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&globals, &file, a),
        Command::Train(a) => cmd_train(&globals, &file, a),
        Command::Generate(a) => cmd_generate(&globals, &file, a),
        Command::Sweep(a) => cmd_sweep(&globals, &file, a),
        Command::Evaluate(a) => cmd_evaluate(&globals, &file, a),
    }
}

/// Creates `dir` if needed and checks that files can be written into it.
fn ensure_writable(dir: &Path) -> CliResult<()> {
    let fail = |e: std::io::Error| invalid(format!("output directory {} is not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(format!(".s2m-probe-{}", std::process::id()));
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn parse_style(s: Option<&String>, fallback: SketchStyle) -> CliResult<SketchStyle> {
    s.map_or(Ok(fallback), |s| s.parse().map_err(anyhow::Error::from))
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("s2m-cache"))
}

fn sample_name(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(4);
    format!("{i:0width$}")
}

#[derive(Serialize)]
struct SimSidecar<'a> {
    seed: u64,
    style: SketchStyle,
    sigma: f64,
    sim_params: &'a SimParams,
    instance_count: usize,
    under_placed: bool,
}

pub fn cmd_simulate(g: &Globals, file: &FileConfig, a: SimulateArgs) -> CliResult<()> {
    let style = parse_style(a.style.as_ref(), file.simulate.style)?;
    let count = a.count.unwrap_or(file.simulate.count);
    let sigma = a.sigma.unwrap_or(file.simulate.sigma);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    let mut sim = file.sim.clone();
    if let Some(Shape(shape)) = a.shape {
        sim.image_shape = shape;
    }
    sim.validate()?;
    ensure_writable(&g.out)?;
    for i in 0..count {
        let seed = derive_seed(g.seed, i as u64);
        let params = sim.with_seed(derive_seed(seed, stream::MASK));
        let (mask, under_placed) = simulate_mask(style, &params)?;
        let sketch = blur_sketch(
            &mask_to_sketch(&mask, style, &params, derive_seed(seed, stream::SKETCH))?,
            sigma,
        )?;
        let name = sample_name(i, count);
        io::write_mask_tiff(&g.out.join("masks").join(format!("{name}.tif")), &mask)?;
        io::write_float_tiff(&g.out.join("sketches").join(format!("{name}.tif")), &sketch.intensity)?;
        io::write_json(
            &g.out.join("masks").join(format!("{name}.json")),
            &SimSidecar {
                seed,
                style,
                sigma,
                sim_params: &params,
                instance_count: mask.instance_count(),
                under_placed,
            },
        )?;
        if under_placed {
            log::warn!("sample {name}: placed fewer instances than requested");
        }
    }
    log::info!("wrote {count} mask/sketch pairs to {}", g.out.display());
    Ok(())
}

fn loss_csv(state: &TrainState) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in &state.loss_history {
        writeln!(s, "{step},{loss}").expect("write to string");
    }
    s
}

/// Running mean over `window` steps, for a readable loss plot.
fn smoothed(history: &[(u64, f64)], window: usize) -> Vec<(f64, f64)> {
    let window = window.max(1);
    history
        .chunks(window)
        .map(|c| {
            let x = c.iter().map(|p| p.0 as f64).sum::<f64>() / c.len() as f64;
            let y = c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64;
            (x, y)
        })
        .collect()
}

pub fn cmd_train(g: &Globals, file: &FileConfig, a: TrainArgs) -> CliResult<()> {
    let t = &file.train;
    let toy = a.toy_corpus || (a.images.is_none() && t.toy_corpus);
    let images = a.images.clone().or_else(|| t.images.clone());
    if !toy && images.is_none() {
        return Err(invalid("pass --toy-corpus or --images DIR"));
    }
    if toy && a.images.is_some() {
        return Err(invalid("--toy-corpus and --images are mutually exclusive"));
    }
    let schedule = NoiseSchedule::new(file.schedule)?;
    let opts = TrainOptions {
        steps: a.steps.unwrap_or(t.steps),
        batch_size: a.batch_size.unwrap_or(t.batch_size),
        optimizer: AdamConfig {
            lr: a.lr.unwrap_or(t.lr),
            ..AdamConfig::default()
        },
        checkpoint_every: Some(a.checkpoint_every.unwrap_or(t.checkpoint_every)).filter(|&c| c > 0),
        checkpoint_path: Some(g.out.join("denoiser.ckpt")),
        log_every: 500,
    };
    if !(opts.optimizer.lr > 0.0 && opts.optimizer.lr.is_finite()) {
        return Err(invalid(format!("learning rate must be > 0, got {}", opts.optimizer.lr)));
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| invalid(e.to_string()))?;
            log::info!("resuming from {} at step {}", path.display(), ckpt.state.step);
            ckpt.into_trainer(opts.optimizer)
        }
        None => {
            let mut cfg = file.denoiser.clone();
            cfg.base_channels = a.base_channels.unwrap_or(cfg.base_channels);
            cfg.depth = a.depth.unwrap_or(cfg.depth);
            cfg.time_embed_dim = a.time_embed_dim.unwrap_or(cfg.time_embed_dim);
            if let Some(p) = a.patch {
                cfg.input_rank = p.len();
                cfg.patch_shape = p;
            }
            Trainer::new(init_denoiser(cfg, g.seed)?, opts.optimizer, g.seed)
        }
    };
    let patch = trainer.denoiser.config().patch_shape.clone();
    let corpus = if toy {
        let mut toy_params = t.toy.clone();
        if toy_params.structures.image_shape.len() != patch.len() {
            return Err(invalid("toy corpus rank differs from the patch rank"));
        }
        toy_params.structures.validate()?;
        if toy_params.image_count == 0 {
            toy_params.image_count = 1;
        }
        ImageCorpus::toy_cached(&toy_params, patch, &cache_dir())?
    } else {
        let dir = images.expect("checked above");
        let (corpus, skipped) = ImageCorpus::from_tiff_dir(&dir, patch)?;
        for (p, why) in &skipped {
            log::warn!("skipped {}: {why}", p.display());
        }
        corpus
    };
    ensure_writable(&g.out)?;
    log::info!(
        "training {} parameters for {} steps (batch {})",
        trainer.denoiser.params().len(),
        opts.steps,
        opts.batch_size
    );
    let state = train(&mut trainer, &corpus as &dyn PatchSource, &schedule, &opts)?;
    io::write_atomic(&g.out.join("loss.csv"), loss_csv(&state).as_bytes())?;
    let window = (state.loss_history.len() / 400).max(1);
    plot::line_chart(&[smoothed(&state.loss_history, window)], 640, 360, true).save(&g.out.join("loss.png"))?;
    log::info!("checkpoint written to {}", g.out.join("denoiser.ckpt").display());
    Ok(())
}

/// File name plus a content hash, recorded as provenance.
fn checkpoint_id(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let h = bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    Ok(format!("{name}@{h:016x}"))
}

fn load_for_inference(path: Option<PathBuf>, schedule: &NoiseSchedule) -> CliResult<(crate::denoiser::Denoiser, String)> {
    let path = path.ok_or_else(|| invalid("--checkpoint is required"))?;
    let ckpt = load_checkpoint(&path).map_err(|e| invalid(e.to_string()))?;
    if let Some(bound) = ckpt.denoiser.schedule() {
        if bound != schedule.params() {
            return Err(Error::ScheduleMismatch {
                checkpoint: bound.id(),
                supplied: schedule.id(),
            }
            .into());
        }
    }
    Ok((ckpt.denoiser, checkpoint_id(&path)?))
}

pub fn cmd_generate(g: &Globals, file: &FileConfig, a: GenerateArgs) -> CliResult<()> {
    let s = &file.generate;
    let schedule = NoiseSchedule::new(file.schedule)?;
    let config = GenerationConfig {
        t_start: a.t_start.unwrap_or(s.t_start),
        sigma: a.sigma.unwrap_or(s.sigma),
        seed: g.seed,
        clamp_output: !a.no_clamp && s.clamp_output,
    };
    config.validate(&schedule)?;
    let style = parse_style(a.style.as_ref(), s.style)?;
    let n = a.n.unwrap_or(s.n);
    if n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    file.sim.validate()?;
    let (denoiser, id) = load_for_inference(a.checkpoint.or_else(|| s.checkpoint.clone()), &schedule)?;
    denoiser.config().check_input_shape(&file.sim.image_shape)?;
    ensure_writable(&g.out)?;
    let manifest = generate_dataset(
        &denoiser,
        &schedule,
        &DatasetRequest {
            sim: file.sim.clone(),
            style,
            n_samples: n,
            config,
            out_dir: g.out.clone(),
            jobs: g.jobs,
            checkpoint_id: Some(id),
        },
    )?;
    log::info!("wrote {} samples to {}", manifest.entries.len(), g.out.display());
    Ok(())
}

/// Reference pairs from two directories, matched by file name.
fn load_reference_dirs(images: &Path, masks: &Path) -> CliResult<(Vec<ImageTensor>, Vec<LabelMask>)> {
    let mut names: Vec<PathBuf> = fs::read_dir(images)
        .map_err(|e| invalid(format!("{}: {e}", images.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tif" || e == "tiff"))
        .collect();
    names.sort();
    let mut imgs = Vec::new();
    let mut ms = Vec::new();
    for p in names {
        let name = p.file_name().expect("file");
        let mp = masks.join(name);
        if !mp.is_file() {
            return Err(invalid(format!("no mask for reference image {}", p.display())));
        }
        let img = io::read_image_tiff(&p, ValueRange::Unit)?;
        imgs.push(ImageTensor::new(img.shape().to_vec(), minmax_to_model(img.data()), ValueRange::Model)?);
        ms.push(io::read_mask_tiff(&mp)?);
    }
    if imgs.is_empty() {
        return Err(invalid(format!("no reference images in {}", images.display())));
    }
    Ok((imgs, ms))
}

fn grid_of(report: &SweepReport, t_starts: &[usize], sigmas: &[f64], f: impl Fn(&crate::metrics::SweepCell) -> f64) -> Vec<Vec<f64>> {
    t_starts
        .iter()
        .map(|&t| sigmas.iter().map(|&s| report.cell(t, s).map_or(f64::NAN, &f)).collect())
        .collect()
}

pub fn cmd_sweep(g: &Globals, file: &FileConfig, a: SweepArgs) -> CliResult<()> {
    let s = &file.sweep;
    let schedule = NoiseSchedule::new(file.schedule)?;
    let config = SweepConfig {
        t_starts: a.t_starts.unwrap_or_else(|| s.t_starts.clone()),
        sigmas: a.sigmas.unwrap_or_else(|| s.sigmas.clone()),
        seeds: a.seeds.unwrap_or_else(|| s.seeds.clone()),
        style: s.style,
        sim: file.sim.clone(),
        jobs: g.jobs,
        ..SweepConfig::default()
    };
    for &t in &config.t_starts {
        schedule.check_step(t, 1)?;
    }
    if config.t_starts.is_empty() || config.sigmas.is_empty() || config.seeds.is_empty() {
        return Err(invalid("sweep grids and seed list must be non-empty"));
    }
    let (denoiser, id) = load_for_inference(a.checkpoint.or_else(|| s.checkpoint.clone()), &schedule)?;
    let (images, masks) = match (a.ref_images.or_else(|| s.ref_images.clone()), a.ref_masks.or_else(|| s.ref_masks.clone())) {
        (Some(i), Some(m)) => load_reference_dirs(&i, &m)?,
        (None, None) => {
            let count = a.references.unwrap_or(s.references);
            if count == 0 {
                return Err(invalid("--references must be at least 1"));
            }
            let corpus = ImageCorpus::toy_cached(&file.train.toy, denoiser.config().patch_shape.clone(), &cache_dir())?;
            let mut r = rng::seeded(derive_seed(g.seed, 0x4EF));
            corpus.sample_pairs(count, &mut r)?.into_iter().unzip()
        }
        _ => return Err(invalid("--ref-images and --ref-masks go together")),
    };
    ensure_writable(&g.out)?;
    let report = sweep(&denoiser, &schedule, &images, &masks, &config, Some(id))?;
    io::write_atomic(&g.out.join("sweep.csv"), report.to_csv().as_bytes())?;
    io::write_json(&g.out.join("sweep.json"), &report)?;
    let hl = config
        .t_starts
        .iter()
        .position(|&t| t == report.recommended.0)
        .zip(config.sigmas.iter().position(|&s| s == report.recommended.1));
    for (name, grid) in [
        ("sweep_psnr.png", grid_of(&report, &config.t_starts, &config.sigmas, |c| c.psnr_db)),
        ("sweep_zncc.png", grid_of(&report, &config.t_starts, &config.sigmas, |c| c.zncc)),
        ("sweep_hist.png", grid_of(&report, &config.t_starts, &config.sigmas, |c| c.hist_similarity)),
    ] {
        plot::heatmap(&grid, hl, 48).save(&g.out.join(name))?;
    }
    let lines: Vec<Vec<(f64, f64)>> = config
        .sigmas
        .iter()
        .map(|&sg| {
            config
                .t_starts
                .iter()
                .filter_map(|&t| report.cell(t, sg).map(|c| (t as f64, c.hist_similarity)))
                .collect()
        })
        .collect();
    plot::line_chart(&lines, 480, 320, false).save(&g.out.join("sweep_lines.png"))?;
    for c in &report.grid {
        log::info!(
            "t_start {:>4} sigma {:>4}: psnr {:.2} dB, zncc {:.3}, hist {:.3}{}",
            c.t_start,
            c.sigma,
            c.psnr_db,
            c.zncc,
            c.hist_similarity,
            if c.recommended { "  (recommended)" } else { "" }
        );
    }
    Ok(())
}

/// Numbers separated by whitespace or commas; `#` starts a comment.
pub fn parse_scores(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split([',', ' ', '\t']))
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad score `{t}`: {e}")))
        .collect()
}

fn tif_names(dir: &Path) -> CliResult<Vec<std::ffi::OsString>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(|e| invalid(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "tif" || x == "tiff"))
        .map(|e| e.file_name())
        .collect();
    v.sort();
    Ok(v)
}

pub fn cmd_evaluate(g: &Globals, file: &FileConfig, a: EvaluateArgs) -> CliResult<()> {
    let s = &file.evaluate;
    let pred = a.pred.or_else(|| s.pred.clone());
    let truth = a.truth.or_else(|| s.truth.clone());
    let scores = a.scores_a.or_else(|| s.scores_a.clone()).zip(a.scores_b.or_else(|| s.scores_b.clone()));
    let threshold = a.threshold.unwrap_or(s.threshold);
    if pred.is_none() && scores.is_none() {
        return Err(invalid("pass --pred/--truth directories and/or --scores-a/--scores-b files"));
    }
    let mut jobs: Vec<(PathBuf, PathBuf, String)> = Vec::new();
    if let (Some(p), Some(t)) = (&pred, &truth) {
        for name in tif_names(t)? {
            let pp = p.join(&name);
            if !pp.is_file() {
                return Err(invalid(format!("no prediction for {}", t.join(&name).display())));
            }
            jobs.push((pp, t.join(&name), name.to_string_lossy().into_owned()));
        }
        if jobs.is_empty() {
            return Err(invalid(format!("no truth masks in {}", t.display())));
        }
    }
    let samples = match &scores {
        Some((fa, fb)) => {
            let read = |p: &Path| -> CliResult<Vec<f64>> {
                let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                parse_scores(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
            };
            Some((read(fa)?, read(fb)?))
        }
        None => None,
    };
    ensure_writable(&g.out)?;
    if !jobs.is_empty() {
        let mut rows = String::from("file,truth_id,iou\n");
        let mut summary = String::from("file,mean_iou,matched,truth_instances\n");
        for (pp, tp, name) in &jobs {
            let report = instance_iou(&io::read_mask_tiff(pp)?, &io::read_mask_tiff(tp)?, threshold)?;
            for (id, v) in &report.per_instance {
                writeln!(rows, "{name},{id},{v}").expect("write to string");
            }
            writeln!(summary, "{name},{},{},{}", report.mean, report.matched, report.per_instance.len())
                .expect("write to string");
            println!("{name}: mean IoU {:.4} ({} of {} matched at >= {threshold})", report.mean, report.matched, report.per_instance.len());
        }
        io::write_atomic(&g.out.join("iou.csv"), rows.as_bytes())?;
        io::write_atomic(&g.out.join("iou_summary.csv"), summary.as_bytes())?;
    }
    if let Some((sa, sb)) = samples {
        let r = rank_sum_test(&sa, &sb)?;
        io::write_json(&g.out.join("rank_sum.json"), &r)?;
        println!("rank-sum: U = {}, p = {} ({:?}, n = {}, m = {})", r.u, r.p_two_sided, r.method, r.n, r.m);
    }
    Ok(())
}
