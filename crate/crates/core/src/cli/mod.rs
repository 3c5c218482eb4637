//! Command-line entry points.
//!
//! Exit status: `0` success, `1` runtime failure, `2` usage error,
//! `3` rejected input. Every command writes a [`RunManifest`] next to its
//! output (`<out>.manifest.json`) unless `--manifest` names another path.
//!
//! Environment:
//! - `MOTION_TRANSFER_RECAPTION_ENDPOINT`: recaptioner URL used when
//!   `--endpoint` is not given; without either the deterministic mock runs.
//! - `MOTION_TRANSFER_CACHE_DIR`: directory for the default backbone file
//!   (`backbone.safetensors`) used when `--backbone` is not given.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::appearance::{HttpRecaptioner, MockRecaptioner, ProviderRegistry, Recaptioner};
use crate::archive::file_sha256;
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{build_eval_prompts, load_motion_dataset, pretrain_corpus, synth_dataset, Shape, Trajectory};
use crate::eval::{evaluate_benchmark, BenchmarkMotion, TrajectoryEmbedder};
use crate::sampling::{generate, write_generation, GenerationRecord, SampleConfig};
use crate::training::{
    pretrain_backbone, recaption_dataset, train_appearance_logged, train_motion_logged, MotionCheckpoint,
    PretrainConfig, SpatialCheckpoint, TrainConfig, TrainLog,
};
use crate::{Error, Result};

pub use manifest::{ConfigLayers, RunManifest};

pub const ENDPOINT_ENV: &str = "MOTION_TRANSFER_RECAPTION_ENDPOINT";
pub const CACHE_DIR_ENV: &str = "MOTION_TRANSFER_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "motion-transfer",
    version,
    about = "Customized motion transfer for a small text-to-video diffusion model"
)]
pub struct Cli {
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic motion dataset directory.
    SynthData(SynthArgs),
    /// Write freshly seeded backbone weights.
    InitBackbone(InitArgs),
    /// Pretrain backbone weights on a synthetic corpus.
    Pretrain(PretrainArgs),
    /// Recaption every clip of a dataset and write the prompts as JSON.
    Recaption(RecaptionArgs),
    /// Stage 1: spatial adapters from single frames.
    TrainAppearance(AppearanceArgs),
    /// Stage 2: temporal adapters, motion enhancer and injector.
    TrainMotion(MotionArgs),
    /// Sample a clip.
    Generate(GenerateArgs),
    /// Generate and score the six evaluation prompts per motion.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "square")]
    pub shape: String,
    #[arg(long, default_value = "red")]
    pub color: String,
    #[arg(long, default_value = "circle")]
    pub trajectory: String,
    #[arg(long, default_value = "white")]
    pub background: String,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this backbone instead of fresh weights.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// TOML file with pretraining keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    pub corpus_size: usize,
    /// Trajectories left out of the corpus (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct RecaptionerArgs {
    /// Recaptioner endpoint; falls back to the environment, then to the mock.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
}

#[derive(Args, Debug)]
pub struct RecaptionArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub recaptioner: RecaptionerArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Flat TOML file of training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub null_prob: Option<f64>,
    /// Append one JSON line per step to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AppearanceArgs {
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub recaptioner: RecaptionerArgs,
}

#[derive(Args, Debug)]
pub struct MotionArgs {
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub spatial: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "palette")]
    pub image_provider: String,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SampleFlags {
    /// TOML file of sampling keys.
    #[arg(long)]
    pub sample_config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "cfg")]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub motion: Option<PathBuf>,
    #[arg(long)]
    pub subject: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub verb_index: Option<usize>,
    #[arg(long)]
    pub preview: bool,
    #[command(flatten)]
    pub sample: SampleFlags,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Motion checkpoints (repeatable).
    #[arg(long, required = true)]
    pub motion: Vec<PathBuf>,
    /// Reference datasets (repeatable), matched to checkpoints by motion id.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "cat,dog,panda")]
    pub subjects: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "in the living room,on the beach")]
    pub contexts: Vec<String>,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub reference_seed: u64,
    #[command(flatten)]
    pub sample: SampleFlags,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::InitBackbone(_) => "init-backbone",
            Command::Pretrain(_) => "pretrain",
            Command::Recaption(_) => "recaption",
            Command::TrainAppearance(_) => "train-appearance",
            Command::TrainMotion(_) => "train-motion",
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::SynthData(a) => &a.out,
            Command::InitBackbone(a) => &a.out,
            Command::Pretrain(a) => &a.out,
            Command::Recaption(a) => &a.out,
            Command::TrainAppearance(a) => &a.out,
            Command::TrainMotion(a) => &a.out,
            Command::Generate(a) => &a.out,
            Command::Evaluate(a) => &a.out,
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        3
    } else {
        1
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let manifest_path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| sidecar(cli.command.out(), "manifest.json"));
    let mut m = RunManifest::new(cli.command.name(), &argv);
    let start = Instant::now();
    let result = dispatch(&cli.command, &mut m);
    m.wallclock_seconds = start.elapsed().as_secs_f64();
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            m.error = Some(e.to_string());
            exit_code(e)
        }
    };
    m.status = code;
    if let Err(e) = m.write(&manifest_path) {
        eprintln!("error: could not write manifest: {e}");
        return if code == 0 { 1 } else { code };
    }
    code
}

/// `<path>.<suffix>`, e.g. `m.ckpt.manifest.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn dispatch(cmd: &Command, m: &mut RunManifest) -> Result<()> {
    let dev = Device::Cpu;
    match cmd {
        Command::SynthData(a) => synth_data(a, m),
        Command::InitBackbone(a) => {
            let cfg = BackboneConfig {
                seed: a.seed,
                ..BackboneConfig::default()
            };
            m.seeds.insert("backbone".into(), a.seed);
            m.set_config(ConfigLayers::merge(
                serde_json::to_value(&cfg)?,
                json!({}),
                json!({"seed": a.seed}),
            ));
            let hash = Backbone::seeded(cfg, &dev)?.save(&a.out)?;
            m.output("backbone", &a.out);
            m.checkpoint(&a.out, hash);
            Ok(())
        }
        Command::Pretrain(a) => pretrain(a, m, &dev),
        Command::Recaption(a) => {
            let ds = load_motion_dataset(&a.dataset)?;
            m.input("dataset", &a.dataset);
            m.seeds.insert("recaption".into(), a.seed);
            let client = recaptioner(&a.recaptioner);
            m.set_config(ConfigLayers::merge(
                json!({}),
                json!({}),
                json!({"recaptioner": client.name(), "seed": a.seed}),
            ));
            let out: Vec<Value> = recaption_dataset(&ds, client.as_ref(), a.seed)?
                .into_iter()
                .zip(&ds.clip_ids)
                .map(|((p, outcome), id)| {
                    json!({
                        "clip_id": id,
                        "prompt": p,
                        "fell_back": matches!(outcome, crate::appearance::RecaptionOutcome::FellBack(_)),
                    })
                })
                .collect();
            write_text(&a.out, &serde_json::to_string_pretty(&out)?)?;
            m.output("recaptions", &a.out);
            Ok(())
        }
        Command::TrainAppearance(a) => {
            let model = load_backbone(a.backbone.as_deref(), m, &dev)?;
            let ds = load_motion_dataset(&a.dataset)?;
            m.input("dataset", &a.dataset);
            let cfg = train_config(&a.train, m)?;
            let client = recaptioner(&a.recaptioner);
            m.inputs.insert("recaptioner".into(), client.name().to_string());
            let mut log = train_log(&a.train, m)?;
            let ckpt = train_appearance_logged(&model, &ds, &cfg, client.as_ref(), &mut log)?;
            let hash = ckpt.save(&a.out)?;
            m.output("spatial", &a.out);
            m.checkpoint(&a.out, hash);
            Ok(())
        }
        Command::TrainMotion(a) => {
            let model = load_backbone(a.backbone.as_deref(), m, &dev)?;
            let ds = load_motion_dataset(&a.dataset)?;
            m.input("dataset", &a.dataset);
            let spatial = SpatialCheckpoint::load(&a.spatial, &dev)?;
            m.input("spatial", &a.spatial);
            m.checkpoint(&a.spatial, file_sha256(&a.spatial)?);
            let cfg = train_config(&a.train, m)?;
            let provider = ProviderRegistry::with_defaults().image(&a.image_provider)?;
            m.inputs.insert("image_provider".into(), a.image_provider.clone());
            let mut log = train_log(&a.train, m)?;
            let ckpt = train_motion_logged(&model, &ds, &spatial, &cfg, provider.as_ref(), &mut log)?;
            let hash = ckpt.save(&a.out)?;
            m.output("motion", &a.out);
            m.checkpoint(&a.out, hash);
            Ok(())
        }
        Command::Generate(a) => {
            let model = load_backbone(a.backbone.as_deref(), m, &dev)?;
            let mut cfg = sample_config(&a.sample, m)?;
            cfg.verb_index = a.verb_index;
            let motion = a
                .motion
                .as_ref()
                .map(|p| load_checkpoint(p, m, |p| MotionCheckpoint::load(p, &dev), "motion"))
                .transpose()?;
            let subject = a
                .subject
                .as_ref()
                .map(|p| load_checkpoint(p, m, |p| SpatialCheckpoint::load(p, &dev), "subject"))
                .transpose()?;
            let clip = generate(&model, &a.prompt, motion.as_ref(), subject.as_ref(), &cfg)?;
            let record = GenerationRecord {
                prompt: a.prompt.clone(),
                fps: cfg.fps,
                seed: cfg.seed,
                config: cfg.clone(),
                backbone_checksum: model.weights().checksum()?,
                motion_checksum: a
                    .motion
                    .as_ref()
                    .and_then(|p| m.checkpoint_hashes.get(&p.display().to_string()).cloned()),
                subject_checksum: a
                    .subject
                    .as_ref()
                    .and_then(|p| m.checkpoint_hashes.get(&p.display().to_string()).cloned()),
            };
            write_generation(&a.out, &clip, &record, a.preview)?;
            m.output("generation", &a.out);
            Ok(())
        }
        Command::Evaluate(a) => evaluate(a, m, &dev),
    }
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn parse_shape(s: &str) -> Result<Shape> {
    Shape::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
}

fn parse_trajectory(s: &str) -> Result<Trajectory> {
    Trajectory::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown trajectory {s:?}")))
}

fn synth_data(a: &SynthArgs, m: &mut RunManifest) -> Result<()> {
    let ds = synth_dataset(
        parse_shape(&a.shape)?,
        &a.color,
        parse_trajectory(&a.trajectory)?,
        &a.background,
        a.count,
        a.frames,
        a.seed,
    )?;
    m.seeds.insert("synth".into(), a.seed);
    m.set_config(ConfigLayers::merge(
        json!({}),
        json!({}),
        json!({
            "shape": a.shape, "color": a.color, "trajectory": a.trajectory,
            "background": a.background, "count": a.count, "frames": a.frames, "seed": a.seed,
        }),
    ));
    ds.save(&a.out)?;
    m.output("dataset", &a.out);
    Ok(())
}

fn pretrain(a: &PretrainArgs, m: &mut RunManifest, dev: &Device) -> Result<()> {
    let start = match &a.backbone {
        Some(p) => load_backbone(Some(p), m, dev)?,
        None => Backbone::seeded(BackboneConfig::default(), dev)?,
    };
    let mut flags = Map::new();
    put(&mut flags, "steps", a.steps);
    put(&mut flags, "batch_size", a.batch_size);
    put(&mut flags, "learning_rate", a.lr);
    put(&mut flags, "seed", a.seed);
    let layers = layered(&PretrainConfig::default(), a.config.as_deref(), flags)?;
    let cfg: PretrainConfig =
        serde_json::from_value(layers.effective.clone()).map_err(|e| Error::Config(e.to_string()))?;
    m.set_config(layers);
    m.seeds.insert("pretrain".into(), cfg.seed);
    let excluded = a
        .exclude
        .iter()
        .map(|s| parse_trajectory(s))
        .collect::<Result<Vec<_>>>()?;
    let corpus = pretrain_corpus(cfg.seed, a.corpus_size, start.config().frames, &excluded)?;
    let model = pretrain_backbone(&start, &corpus, &cfg, |s, l| {
        if s % 100 == 0 {
            log::info!("pretrain step {s}: loss {l:.4}");
        }
    })?;
    let hash = model.save(&a.out)?;
    m.output("backbone", &a.out);
    m.checkpoint(&a.out, hash);
    Ok(())
}

fn evaluate(a: &EvaluateArgs, m: &mut RunManifest, dev: &Device) -> Result<()> {
    let model = load_backbone(a.backbone.as_deref(), m, dev)?;
    let sample = sample_config(&a.sample, m)?;
    let mut checkpoints = BTreeMap::new();
    for p in &a.motion {
        let c = load_checkpoint(p, m, |p| MotionCheckpoint::load(p, dev), "motion")?;
        checkpoints.insert(c.motion_id.clone(), c);
    }
    let subjects: Vec<&str> = a.subjects.iter().map(String::as_str).collect();
    let contexts: Vec<&str> = a.contexts.iter().map(String::as_str).collect();
    let mut motions = Vec::new();
    for (i, p) in a.dataset.iter().enumerate() {
        let ds = load_motion_dataset(p)?;
        m.input(&format!("dataset.{i}"), p);
        motions.push(BenchmarkMotion {
            prompts: build_eval_prompts(&subjects, &contexts, &ds.verb),
            motion_id: ds.motion_id,
            references: ds.clips,
        });
    }
    m.seeds.insert("reference".into(), a.reference_seed);
    let registry = ProviderRegistry::with_defaults();
    let (image, text) = (registry.image("palette")?, registry.text("palette")?);
    let report = evaluate_benchmark(
        &model,
        &checkpoints,
        &motions,
        image.as_ref(),
        text.as_ref(),
        &TrajectoryEmbedder::default(),
        &sample,
        a.reference_seed,
    )?;
    report.save(&a.out)?;
    m.output("report", &a.out);
    Ok(())
}

fn put<T: serde::Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.into(), serde_json::to_value(v).expect("flag value serializes"));
    }
}

/// Defaults, optional TOML file, then flags.
fn layered<T: serde::Serialize>(defaults: &T, file: Option<&Path>, flags: Map<String, Value>) -> Result<ConfigLayers> {
    let file_value = match file {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: toml::Table = toml::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::to_value(t)?
        }
        None => json!({}),
    };
    Ok(ConfigLayers::merge(
        serde_json::to_value(defaults)?,
        file_value,
        Value::Object(flags),
    ))
}

fn train_config(f: &TrainFlags, m: &mut RunManifest) -> Result<TrainConfig> {
    let mut flags = Map::new();
    put(&mut flags, "max_steps", f.steps);
    put(&mut flags, "learning_rate", f.lr);
    put(&mut flags, "lora_rank", f.rank);
    put(&mut flags, "lambda_reg", f.lambda);
    put(&mut flags, "batch_size", f.batch_size);
    put(&mut flags, "seed", f.seed);
    put(&mut flags, "frames_per_sample", f.frames);
    put(&mut flags, "null_prompt_probability", f.null_prob);
    if let Some(p) = &f.config {
        m.input("config", p);
    }
    let layers = layered(&TrainConfig::default(), f.config.as_deref(), flags)?;
    let cfg: TrainConfig =
        serde_json::from_value(layers.effective.clone()).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    m.seeds.insert("train".into(), cfg.seed);
    m.set_config(layers);
    Ok(cfg)
}

fn train_log(f: &TrainFlags, m: &mut RunManifest) -> Result<TrainLog> {
    Ok(match &f.log {
        Some(p) => {
            m.output("log", p);
            TrainLog::to_file(p)
        }
        None => TrainLog::in_memory(),
    })
}

fn sample_config(f: &SampleFlags, m: &mut RunManifest) -> Result<SampleConfig> {
    let mut flags = Map::new();
    put(&mut flags, "num_steps", f.steps);
    put(&mut flags, "guidance_scale", f.guidance);
    put(&mut flags, "eta", f.eta);
    put(&mut flags, "frames", f.frames);
    put(&mut flags, "fps", f.fps);
    put(&mut flags, "seed", f.seed);
    if let Some(p) = &f.sample_config {
        m.input("sample_config", p);
    }
    let layers = layered(&SampleConfig::default(), f.sample_config.as_deref(), flags)?;
    let cfg: SampleConfig =
        serde_json::from_value(layers.effective.clone()).map_err(|e| Error::Config(e.to_string()))?;
    m.seeds.insert("sample".into(), cfg.seed);
    m.set_config(layers);
    Ok(cfg)
}

fn recaptioner(a: &RecaptionerArgs) -> Box<dyn Recaptioner> {
    match a.endpoint.clone().or_else(|| std::env::var(ENDPOINT_ENV).ok()) {
        Some(url) => Box::new(HttpRecaptioner::new(
            url,
            Duration::from_millis(a.timeout_ms),
            a.retries,
        )),
        None => Box::new(MockRecaptioner),
    }
}

fn load_backbone(path: Option<&Path>, m: &mut RunManifest, dev: &Device) -> Result<Backbone> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) => PathBuf::from(d).join("backbone.safetensors"),
            None => return Err(Error::Config(format!("pass --backbone or set {CACHE_DIR_ENV}"))),
        },
    };
    let model = Backbone::load(&path, dev)?;
    m.input("backbone", &path);
    m.checkpoint(&path, file_sha256(&path)?);
    Ok(model)
}

fn load_checkpoint<T>(path: &Path, m: &mut RunManifest, load: impl FnOnce(&Path) -> Result<T>, key: &str) -> Result<T> {
    let c = load(path)?;
    m.input(key, path);
    m.checkpoint(path, file_sha256(path)?);
    Ok(c)
}
