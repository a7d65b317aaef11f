//! Training loop, learning-rate schedule, checkpoints and metrics log.

pub mod checkpoint;
pub mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::{Image, SceneSample};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalConfig, EvalImage, EvalReport, Protocol};
use crate::heads::LossBreakdown;
use crate::model::{LossConfig, MaskStats, ModelConfig, TextSpotter};
use crate::nn::{Binding, ParamStore};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Published schedule and sizes; documentation, not a desk run.
    Paper,
    #[default]
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?}; expected paper or desk"))),
        }
    }
}

/// Photometric jitter: `p' = clamp((p - 0.5) * (1 + c) + 0.5 + b)` with
/// `b ~ U(-brightness, brightness)` and `c ~ U(-contrast, contrast)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            brightness: 0.05,
            contrast: 0.1,
        }
    }
}

impl Augmentation {
    pub fn apply(&self, image: &Image, rng: &mut impl Rng) -> Image {
        if self.brightness <= 0.0 && self.contrast <= 0.0 {
            return image.clone();
        }
        let b = if self.brightness > 0.0 { rng.random_range(-self.brightness..self.brightness) } else { 0.0 };
        let c = if self.contrast > 0.0 { rng.random_range(-self.contrast..self.contrast) } else { 0.0 };
        let mut out = image.clone();
        out.data.iter_mut().for_each(|p| *p = ((*p - 0.5) * (1.0 + c) + 0.5 + b).clamp(0.0, 1.0));
        out
    }
}

/// Stop once both training-set scores reach these values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub detection_hmean: f64,
    pub end_to_end_none: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub iterations: u64,
    pub base_lr: f64,
    /// Iterations at which the rate is multiplied by `decay`.
    pub milestones: Vec<u64>,
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop recognition gradients at SM3.
    pub gradient_block: bool,
    pub optimizer: AdamWConfig,
    pub grad_clip: Option<f64>,
    pub augmentation: Augmentation,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Checkpoint period in iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Training-set evaluation period; 0 disables it.
    pub eval_every: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            iterations: 5000,
            base_lr: 1e-3,
            milestones: vec![4000],
            decay: 0.1,
            batch_size: 2,
            seed: 0,
            gradient_block: false,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
            augmentation: Augmentation::default(),
            loss: LossConfig::default(),
            model: ModelConfig::desk(),
            checkpoint_every: 500,
            eval_every: 250,
            early_stop: Some(EarlyStop {
                detection_hmean: 0.95,
                end_to_end_none: 0.9,
            }),
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            iterations: 450_000,
            base_lr: 2.5e-5,
            milestones: vec![350_000, 420_000],
            decay: 0.1,
            batch_size: 8,
            seed: 0,
            gradient_block: false,
            optimizer: AdamWConfig::default(),
            grad_clip: None,
            augmentation: Augmentation::default(),
            loss: LossConfig::default(),
            model: ModelConfig::paper(),
            checkpoint_every: 10_000,
            eval_every: 0,
            early_stop: None,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.iterations {
                return Err(Error::Config(format!("milestone {last} is not below {} iterations", self.iterations)));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant rate: `base_lr * decay^k` where `k` counts the
/// milestones at or below `iteration`. Evaluated as a division by
/// `(1 / decay)^k`, which is exact for decimal decays such as 0.1.
pub fn lr_schedule(iteration: u64, cfg: &TrainConfig) -> f64 {
    let k = cfg.milestones.iter().filter(|&&m| iteration >= m).count();
    cfg.base_lr / (1.0 / cfg.decay).powi(k as i32)
}

/// One metrics-log line per optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub instances: usize,
    pub mask_min: Option<f64>,
    pub mask_max: Option<f64>,
    pub mask_elements: usize,
    pub mask_violations: usize,
}

/// Training-set scores logged at the evaluation period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub detection_hmean: f64,
    pub end_to_end_none: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub iterations: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub stopped_early: bool,
    /// The metrics log exactly as written.
    pub log: String,
}

/// Runs the model over samples and packages predictions for evaluation.
pub fn predict_samples(model: &TextSpotter, store: &ParamStore, samples: &[SceneSample]) -> Result<Vec<EvalImage>> {
    samples
        .iter()
        .map(|s| {
            let found = model.infer(store, &s.image)?;
            Ok(EvalImage {
                sample_id: s.sample_id.clone(),
                predictions: found.iter().map(|r| r.prediction()).collect(),
                ground_truth: s.instances.clone(),
            })
        })
        .collect()
}

pub fn evaluate_model(model: &TextSpotter, store: &ParamStore, samples: &[SceneSample], cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate(&predict_samples(model, store, samples)?, cfg)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TextSpotter,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub iteration: u64,
    order_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    proposal_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = TextSpotter::new(&config.model, config.seed)?;
        let optimizer = AdamW::new(config.optimizer.clone(), &store);
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(k);
            r
        };
        Ok(Self {
            order_rng: stream(1),
            aug_rng: stream(2),
            proposal_rng: stream(3),
            config,
            model,
            store,
            optimizer,
            iteration: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Continues from a checkpoint's parameters, optimizer and iteration.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.apply(&mut self.store)?;
        if let Some(opt) = ck.optimizer_for(&self.store)? {
            self.optimizer = opt;
        }
        self.iteration = ck.iteration();
        Ok(())
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.order_rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// Losses and gradients of one batch, without updating anything.
    pub fn compute_gradients(&mut self, batch: &[&SceneSample]) -> Result<(LossBreakdown, MaskStats, Vec<Tensor>)> {
        let tape = Tape::new();
        let b = Binding::trainable(&tape, &self.store);
        let (vars, stats) = self
            .model
            .batch_loss(&b, batch, &self.config.loss, self.config.gradient_block, &mut self.proposal_rng)?;
        let breakdown = LossBreakdown::from_vars(&vars, &self.config.loss.lambdas)?;
        let grads = tape.backward(vars.joint(&self.config.loss.lambdas));
        let grads = b.vars().iter().map(|v| grads.wrt(*v)).collect();
        Ok((breakdown, stats, grads))
    }

    /// One optimization step on the next batch.
    pub fn step(&mut self, data: &[SceneSample]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let idx = self.next_batch(data.len());
        let aug = self.config.augmentation.clone();
        let batch: Vec<SceneSample> = idx
            .iter()
            .map(|&i| SceneSample {
                image: aug.apply(&data[i].image, &mut self.aug_rng),
                ..data[i].clone()
            })
            .collect();
        let refs: Vec<&SceneSample> = batch.iter().collect();
        let (loss, stats, mut grads) = self.compute_gradients(&refs)?;
        let grad_norm = match self.config.grad_clip {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let lr = lr_schedule(self.iteration, &self.config);
        self.optimizer.update(&mut self.store, &grads, lr);
        let record = StepRecord {
            iteration: self.iteration,
            lr,
            loss,
            grad_norm,
            instances: refs.iter().map(|s| s.instances.iter().filter(|g| g.legible).count()).sum(),
            mask_min: (stats.elements > 0).then_some(stats.min),
            mask_max: (stats.elements > 0).then_some(stats.max),
            mask_elements: stats.elements,
            mask_violations: stats.violations,
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn evaluate_training_set(&self, data: &[SceneSample]) -> Result<EvalRecord> {
        let cfg = EvalConfig {
            protocols: vec![Protocol::None],
            ..EvalConfig::default()
        };
        let report = evaluate_model(&self.model, &self.store, data, &cfg)?;
        Ok(EvalRecord {
            iteration: self.iteration,
            detection_hmean: report.detection.hmean,
            end_to_end_none: report.end_to_end.get(&Protocol::None).map_or(0.0, |s| s.hmean),
        })
    }

    fn save(&self, out: &Path) -> Result<()> {
        save_checkpoint(&out.join(CHECKPOINT_DIR), &self.store, Some(&self.optimizer), self.iteration, &self.config)
    }

    /// Trains until the configured iteration count or the early-stop scores.
    /// With `out`, writes the metrics log and checkpoints there. A non-finite
    /// loss aborts the run after saving the not-yet-updated parameters.
    pub fn run(&mut self, data: &[SceneSample], out: Option<&Path>) -> Result<TrainOutcome> {
        let mut outcome = TrainOutcome::default();
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let mut emit = |rec: &LogRecord, outcome: &mut TrainOutcome| -> Result<()> {
            let line = serde_json::to_string(rec)?;
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            outcome.log.push_str(&line);
            outcome.log.push('\n');
            Ok(())
        };
        while self.iteration < self.config.iterations {
            let rec = match self.step(data) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out {
                        self.save(dir)?;
                        warn!("aborting at iteration {}; last good state kept in {}", self.iteration, dir.join(CHECKPOINT_DIR).display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let done = self.iteration;
            emit(&LogRecord::Step(rec.clone()), &mut outcome)?;
            if done % 50 == 0 {
                info!("iter {done} lr {:.2e} L_match {:.4} L_rec {:.4}", rec.lr, rec.loss.l_match, rec.loss.l_rec);
            }
            outcome.steps.push(rec);
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 {
                    self.save(dir)?;
                }
            }
            if self.config.eval_every > 0 && done % self.config.eval_every == 0 {
                let ev = self.evaluate_training_set(data)?;
                info!("iter {done} train det H {:.4} e2e {:.4}", ev.detection_hmean, ev.end_to_end_none);
                emit(&LogRecord::Eval(ev.clone()), &mut outcome)?;
                let reached = self
                    .config
                    .early_stop
                    .as_ref()
                    .is_some_and(|s| ev.detection_hmean >= s.detection_hmean && ev.end_to_end_none >= s.end_to_end_none);
                outcome.evals.push(ev);
                if reached {
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
        outcome.iterations = self.iteration;
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(outcome)
    }
}

/// Parses a metrics log back into records.
pub fn read_metrics(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads a model from a checkpoint written by [`Trainer::run`].
pub fn load_model(dir: &Path) -> Result<(TrainConfig, TextSpotter, ParamStore)> {
    let ck = load_checkpoint(dir)?;
    let cfg: TrainConfig = serde_json::from_value(ck.manifest.config.clone())?;
    let (model, mut store) = TextSpotter::new(&cfg.model, cfg.seed)?;
    ck.apply(&mut store)?;
    Ok((cfg, model, store))
}

/// Path of the checkpoint inside a training output directory, or `path`
/// itself when it already is a checkpoint.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.join(checkpoint::MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(0, &cfg), 2.5e-5);
        assert_eq!(lr_schedule(349_999, &cfg), 2.5e-5);
        assert_eq!(lr_schedule(350_000, &cfg), 2.5e-6);
        assert_eq!(lr_schedule(420_000, &cfg), 2.5e-7);
        assert_eq!(lr_schedule(449_999, &cfg), 2.5e-7);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            milestones: vec![10, 10],
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            iterations: 100,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
    }
}
