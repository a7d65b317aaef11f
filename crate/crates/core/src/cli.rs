//! Command-line front end: argument definitions and subcommand runners.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datagen::dataset::{decode_image, save_png};
use crate::datagen::{load_dataset, synthesize_dataset, write_dataset, AnnotationFormat, GenConfig, Image, SceneSample};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, format_predictions, parse_predictions, EvalConfig, EvalImage, Protocol};
use crate::gradcheck::registry::{format_table, run_all};
use crate::gradcheck::{DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use crate::model::InstanceResult;
use crate::tensor::Tensor;
use crate::trainer::{load_checkpoint, load_model, predict_samples, resolve_checkpoint, Profile, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "textspot", version, about = "Synthetic scene text spotting: data, training, evaluation and inspection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    SynthData(SynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Score predictions (or a checkpoint) against a dataset.
    Eval(EvalArgs),
    /// Write one prediction file per image.
    Infer(InferArgs),
    /// Finite-difference check of every registered operation.
    Gradcheck(GradcheckArgs),
    /// Write per-instance mask overlays.
    Visualize(VisualizeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    None,
    Full,
    Strong,
    Weak,
    Generic,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::None => Protocol::None,
            ProtocolArg::Full => Protocol::Full,
            ProtocolArg::Strong => Protocol::Strong,
            ProtocolArg::Weak => Protocol::Weak,
            ProtocolArg::Generic => Protocol::Generic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Quad,
    Polygon,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Polygon)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with training settings; keys override the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    #[arg(long, value_enum)]
    pub gradient_block: Option<Switch>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML file with evaluation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ground-truth dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `<sample_id>.txt` prediction files.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Run this checkpoint instead of reading prediction files.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Protocols to score; repeat the flag for several. Defaults to all.
    #[arg(long, value_enum)]
    pub protocol: Vec<ProtocolArg>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Seed for lexicon distractors.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for `report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Dataset directory or manifest.
    #[arg(long, conflicts_with = "image")]
    pub data: Option<PathBuf>,
    /// Image files; repeat for several.
    #[arg(long)]
    pub image: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Also write the table to `gradcheck.txt` in this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Only the first this many images.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Removes an output path on drop unless kept. Paths that existed before
/// are left alone.
struct OutputGuard {
    path: PathBuf,
    created: bool,
    keep: bool,
}

impl OutputGuard {
    fn new(path: &Path) -> Self {
        Self {
            path: path.to_path_buf(),
            created: !path.exists(),
            keep: false,
        }
    }

    fn keep(mut self) {
        self.keep = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.keep && self.created && self.path.exists() {
            let _ = if self.path.is_dir() {
                fs::remove_dir_all(&self.path)
            } else {
                fs::remove_file(&self.path)
            };
        }
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with every key present in `file` replaced by the file's value.
fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        let value = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        return value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()));
    };
    let over: toml::Value = read_toml(path)?;
    let mut value = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut value, over);
    value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_inputs(input: &InputArgs) -> Result<Vec<SceneSample>> {
    if let Some(data) = &input.data {
        return Ok(load_dataset(data)?.1);
    }
    if input.image.is_empty() {
        return Err(Error::InvalidInput("give --data or at least one --image".into()));
    }
    input
        .image
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(SceneSample {
                image: decode_image(&bytes, p)?,
                instances: Vec::new(),
                sample_id: p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned()),
            })
        })
        .collect()
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let profile = match args.profile {
        Some(ProfileArg::Paper) => Some(Profile::Paper),
        Some(ProfileArg::Desk) => Some(Profile::Desk),
        None => None,
    };
    let file_profile = match &args.config {
        Some(path) => {
            let v: toml::Value = read_toml(path)?;
            v.get("profile").and_then(|p| p.as_str()).map(str::parse::<Profile>).transpose()?
        }
        None => None,
    };
    let base = TrainConfig::for_profile(profile.or(file_profile).unwrap_or_default());
    let mut cfg = layered(&base, args.config.as_deref())?;
    if let Some(p) = profile {
        cfg.profile = p;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(g) = args.gradient_block {
        cfg.gradient_block = g == Switch::On;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
        cfg.milestones.retain(|&m| m < n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_synth(a: &SynthArgs) -> Result<String> {
    let cfg = layered(&GenConfig::default(), a.config.as_deref())?;
    let guard = OutputGuard::new(&a.out);
    let samples = synthesize_dataset(&cfg, a.seed, a.count)?;
    let format = match a.format {
        FormatArg::Quad => AnnotationFormat::Quad,
        FormatArg::Polygon => AnnotationFormat::Polygon,
    };
    let manifest = write_dataset(&a.out, &samples, format, Some(a.seed))?;
    guard.keep();
    Ok(format!("wrote {} images to {}", manifest.entries.len(), a.out.display()))
}

fn run_train(a: &TrainArgs) -> Result<String> {
    let cfg = train_config(a)?;
    let (_, data) = load_dataset(&a.data)?;
    let guard = OutputGuard::new(&a.out);
    let mut trainer = Trainer::new(cfg)?;
    if let Some(r) = &a.resume {
        trainer.resume(&load_checkpoint(&resolve_checkpoint(r))?)?;
    }
    match trainer.run(&data, Some(&a.out)) {
        Ok(outcome) => {
            guard.keep();
            let last = outcome.steps.last().map_or(f64::NAN, |s| s.loss.l_match);
            Ok(format!(
                "trained {} iterations (final L_match {last:.4}); outputs in {}",
                outcome.iterations,
                a.out.display()
            ))
        }
        Err(e @ Error::NonFinite(_)) => {
            guard.keep();
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn run_eval(a: &EvalArgs) -> Result<String> {
    let mut cfg: EvalConfig = layered(&EvalConfig::default(), a.config.as_deref())?;
    if !a.protocol.is_empty() {
        cfg.protocols = a.protocol.iter().map(|&p| p.into()).collect();
    }
    if let Some(iou) = a.iou {
        cfg.iou_threshold = iou;
    }
    if let Some(seed) = a.seed {
        cfg.lexicon.seed = seed;
    }
    let (_, data) = load_dataset(&a.data)?;
    let images = match (&a.predictions, &a.checkpoint) {
        (Some(dir), None) => data
            .iter()
            .map(|s| {
                let path = dir.join(format!("{}.txt", s.sample_id));
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let predictions = parse_predictions(&text).map_err(|e| Error::Dataset {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                Ok(EvalImage {
                    sample_id: s.sample_id.clone(),
                    predictions,
                    ground_truth: s.instances.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        (None, Some(ck)) => {
            let (_, model, store) = load_model(&resolve_checkpoint(ck))?;
            predict_samples(&model, &store, &data)?
        }
        _ => return Err(Error::InvalidInput("give exactly one of --predictions or --checkpoint".into())),
    };
    let report = evaluate(&images, &cfg)?;
    let guard = OutputGuard::new(&a.out);
    create_dir(&a.out)?;
    write_file(&a.out.join("report.json"), &report.to_json()?)?;
    guard.keep();
    Ok(report.summary())
}

fn run_infer(a: &InferArgs) -> Result<String> {
    let (_, model, store) = load_model(&resolve_checkpoint(&a.checkpoint))?;
    let samples = load_inputs(&a.input)?;
    let guard = OutputGuard::new(&a.out);
    create_dir(&a.out)?;
    let mut total = 0;
    for s in &samples {
        let found = model.infer(&store, &s.image)?;
        total += found.len();
        let preds: Vec<_> = found.iter().map(InstanceResult::prediction).collect();
        write_file(&a.out.join(format!("{}.txt", s.sample_id)), &format_predictions(&preds))?;
    }
    guard.keep();
    Ok(format!("{total} detections over {} images written to {}", samples.len(), a.out.display()))
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<String> {
    let outcomes = run_all(a.epsilon);
    let table = format_table(&outcomes, a.tolerance);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed(a.tolerance)).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        print!("{table}");
        Err(Error::InvalidInput(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Names of the overlay layers written per instance.
pub const OVERLAY_LAYERS: [&str; 5] = ["initial_mask", "m1", "m2", "m3", "sm3"];

fn luma(img: &Image, x: usize, y: usize) -> f64 {
    let [r, g, b] = img.pixel(x, y);
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Grayscale composite of `map` (rescaled to `[0, 1]`) over the box region
/// of `img`; the rest of the image is dimmed.
pub fn composite(img: &Image, map: &Tensor, bbox: &[f64; 4]) -> Image {
    let (rows, cols) = (map.dim(0), map.dim(1));
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Image::filled(img.width, img.height, [0.0; 3]);
    for y in 0..img.height {
        for x in 0..img.width {
            let base = 0.35 * luma(img, x, y);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = if px >= bbox[0] && px < bbox[2] && py >= bbox[1] && py < bbox[3] {
                let j = (((px - bbox[0]) / (bbox[2] - bbox[0]) * cols as f64) as usize).min(cols - 1);
                let i = (((py - bbox[1]) / (bbox[3] - bbox[1]) * rows as f64) as usize).min(rows - 1);
                base + 0.65 * (map.at(&[i, j]) - lo) / span
            } else {
                base
            };
            out.set(x, y, [v; 3]);
        }
    }
    out
}

/// The five overlays of one instance, in [`OVERLAY_LAYERS`] order.
pub fn instance_overlays(img: &Image, r: &InstanceResult) -> Vec<(&'static str, Image)> {
    let maps = [&r.initial_mask, &r.refined[0], &r.refined[1], &r.refined[2], &r.sm3];
    OVERLAY_LAYERS.iter().zip(maps).map(|(name, m)| (*name, composite(img, m, &r.bbox))).collect()
}

fn run_visualize(a: &VisualizeArgs) -> Result<String> {
    let (_, model, store) = load_model(&resolve_checkpoint(&a.checkpoint))?;
    let mut samples = load_inputs(&a.input)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let guard = OutputGuard::new(&a.out);
    let mut files = 0;
    let mut instances = 0;
    for s in &samples {
        let found = model.infer(&store, &s.image)?;
        for (k, r) in found.iter().enumerate() {
            let dir = a.out.join(&s.sample_id).join(format!("instance_{k}"));
            create_dir(&dir)?;
            for (name, img) in instance_overlays(&s.image, r) {
                save_png(&img, &dir.join(format!("{name}.png")))?;
                files += 1;
            }
        }
        instances += found.len();
    }
    create_dir(&a.out)?;
    guard.keep();
    info!("{files} overlay files");
    Ok(format!("{files} overlays for {instances} instances written to {}", a.out.display()))
}

/// Runs one parsed invocation and returns its human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::SynthData(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Visualize(a) => run_visualize(a),
    }
}

/// The single-line form used on failure: `error: kind: message`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: {}: {msg}", e.kind())
}
