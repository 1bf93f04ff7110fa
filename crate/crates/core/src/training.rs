//! Multi-sample objective, curriculum, early stopping, optimizer and the
//! resumable training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, RelationalKind};
use crate::dist::PresenceMode;
use crate::dynamics::{FilterOutput, Model};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::noise::{Noise, NoiseState};
use crate::scene::{stack_frames, FrameSequence};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const BEST_DIR: &str = "best";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IwaeConfig {
    pub particles: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for IwaeConfig {
    fn default() -> Self {
        Self { particles: 5, batch_size: 32, learning_rate: 1e-4, clip_norm: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub start_len: usize,
    pub step_every: u64,
    pub max_len: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self { start_len: 3, step_every: 10_000, max_len: 10 }
    }
}

impl CurriculumSchedule {
    pub fn length(&self, iteration: u64) -> usize {
        let grown = self.start_len as u64 + iteration / self.step_every.max(1);
        grown.min(self.max_len as u64) as usize
    }
}

/// Training sequence length after `iteration` optimizer steps.
pub fn curriculum_length(iteration: u64) -> usize {
    CurriculumSchedule::default().length(iteration)
}

/// Patience-based stopping on a validation score (higher is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_improvement: 0 }
    }

    /// Records one validation score; returns true once training should stop.
    pub fn update(&mut self, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b => self.since_improvement += 1,
            _ => {
                self.best = Some(score);
                self.since_improvement = 0;
            }
        }
        self.should_stop()
    }

    pub fn improved_last(&self) -> bool {
        self.best.is_some() && self.since_improvement == 0
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// Exponential annealing of the presence relaxation temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub iterations: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.3, iterations: 10_000 }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, iteration: u64) -> f64 {
        let frac = (iteration as f64 / self.iterations.max(1) as f64).min(1.0);
        self.start * (self.end / self.start).powf(frac)
    }
}

/// `log((1/P) Σ_p exp(w_p))` along the last dimension, shifted by the
/// (constant) maximum for stability.
pub fn log_mean_exp(w: &Tensor) -> Result<Tensor> {
    let p = w.dim(D::Minus1)? as f64;
    let shift = w.max_keepdim(D::Minus1)?.detach();
    let lse = w.broadcast_sub(&shift)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(((lse + shift)? - p.ln())?.squeeze(D::Minus1)?)
}

#[derive(Debug)]
pub struct IwaeOutput {
    /// Scalar: batch mean of the per-sequence bounds.
    pub bound: Tensor,
    /// `(B, P)` sequence log-weights.
    pub log_weights: Tensor,
    pub filter: FilterOutput,
}

/// Multi-sample bound on `frames (B, T, H, W)`: each sequence is filtered
/// `particles` times independently (rows ordered sequence-major).
pub fn iwae_bound(
    model: &Model,
    frames: &Tensor,
    particles: usize,
    noise: &mut Noise,
    mode: PresenceMode,
) -> Result<IwaeOutput> {
    if particles == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    let (b, t, h, w) = frames.dims4()?;
    let tiled = frames.unsqueeze(1)?.expand((b, particles, t, h, w))?.reshape((b * particles, t, h, w))?;
    let filter = model.filter_sequence(&tiled, noise, mode)?;
    let log_weights = filter.total()?.reshape((b, particles))?;
    check_finite(&log_weights, &filter, particles)?;
    let bound = log_mean_exp(&log_weights)?.mean_all()?;
    Ok(IwaeOutput { bound, log_weights, filter })
}

fn check_finite(log_weights: &Tensor, filter: &FilterOutput, particles: usize) -> Result<()> {
    let flat = log_weights.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let Some(row) = flat.iter().position(|v| !v.is_finite()) else {
        return Ok(());
    };
    let mut report = format!(
        "sequence {}, particle {}: total {}",
        row / particles,
        row % particles,
        flat[row]
    );
    for (t, terms) in filter.terms.iter().enumerate() {
        let parts = terms.components()?;
        let shown: Vec<String> = parts.iter().map(|(name, v)| format!("{name}={}", v[row])).collect();
        report.push_str(&format!("; frame {t}: {}", shown.join(" ")));
    }
    Err(Error::NonFinite(report))
}

/// Adam with global-norm gradient clipping. Moments are keyed by parameter
/// name and visited in name order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn apply(&mut self, params: &ParamStore, grads: &GradStore, clip_norm: f64) -> Result<f64> {
        let mut collected = Vec::new();
        let mut sq = 0.0f64;
        for (name, var) in params.vars() {
            let g = match grads.get(var.as_tensor()) {
                // Gradients carry autograd history; keeping it in the moments
                // would grow the graph every step.
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            collected.push((name.clone(), var, g));
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var, g) in collected {
            let g = (g * scale)?;
            let m_prev = match self.m.get(&name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(&name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.learning_rate)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, step: u64) -> Result<()> {
        let map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        self.m.clear();
        self.v.clear();
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t);
            } else {
                return Err(Error::Checkpoint { path: path.to_path_buf(), reason: format!("unexpected entry {k}") });
            }
        }
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iwae: IwaeConfig,
    pub curriculum: CurriculumSchedule,
    pub temperature: TemperatureSchedule,
    pub patience: usize,
    /// Hard cap on optimizer steps; `None` trains until early stopping.
    pub max_iterations: Option<u64>,
    pub seed: u64,
    /// Use at most this many training / validation sequences.
    pub train_sequences: Option<usize>,
    pub val_sequences: Option<usize>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            iwae: IwaeConfig::default(),
            curriculum: CurriculumSchedule::default(),
            temperature: TemperatureSchedule::default(),
            patience: 10,
            max_iterations: None,
            seed: 0,
            train_sequences: None,
            val_sequences: None,
            checkpoint_every: 500,
            log_every: 50,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iwae.particles == 0 || self.iwae.batch_size == 0 {
            return bad("particles and batch_size must be positive");
        }
        if !(self.iwae.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.curriculum.start_len == 0 || self.curriculum.max_len < self.curriculum.start_len {
            return bad("curriculum needs 1 <= start_len <= max_len");
        }
        if !(self.temperature.start > 0.0 && self.temperature.end > 0.0) {
            return bad("temperatures must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// The identity configuration is the non-relational baseline.
    pub fn is_baseline(&self) -> bool {
        self.model.relational.kind == RelationalKind::Identity
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: String,
    pub baseline: bool,
    pub iteration: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub curriculum_length: usize,
    pub best_val: Option<f64>,
    pub early_stopping: EarlyStopping,
    pub rng: NoiseState,
    pub epoch_bound_sum: f64,
    pub epoch_batches: u64,
    pub weights_sha256: String,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint { path, reason: format!("unsupported version {}", m.version) });
        }
        Ok(m)
    }
}

/// Builds a model from a checkpoint directory and checks its weights.
pub fn load_model(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest = CheckpointManifest::read(dir)?;
    if manifest.config.hash()? != manifest.config_hash {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: "config hash mismatch".into() });
    }
    let cfg = &manifest.config;
    let model = Model::new(cfg.model.clone(), cfg.precision.dtype(), init_seed(cfg.seed))?;
    model.params().load(&dir.join(WEIGHTS_FILE))?;
    if model.params().checksum()? != manifest.weights_sha256 {
        return Err(Error::Checkpoint { path: dir.to_path_buf(), reason: "weights checksum mismatch".into() });
    }
    Ok((model, manifest))
}

pub fn init_seed(seed: u64) -> u64 {
    ballsim::seed::stream_seed(seed, "init")
}

fn sampling_seed(seed: u64) -> u64 {
    ballsim::seed::stream_seed(seed, "sampling")
}

fn validation_seed(seed: u64, epoch: u64) -> u64 {
    ballsim::seed::stream_seed(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), "validation")
}

fn shuffle_seed(seed: u64, epoch: u64) -> u64 {
    ballsim::seed::stream_seed(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), "shuffle")
}

pub fn load_sequences(path: &Path, limit: Option<usize>) -> Result<Vec<FrameSequence>> {
    let ds = ballsim::Dataset::read(path)?;
    let take = limit.unwrap_or(ds.sequences.len()).min(ds.sequences.len());
    Ok(ds.sequences[..take].iter().map(|r| FrameSequence::from_record(&ds.header, r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub bound: f64,
    pub grad_norm: f64,
    pub sequence_length: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(StepRecord),
    Epoch {
        epoch: u64,
        iteration: u64,
        train_bound: f64,
        val_bound: f64,
        best_val: f64,
        curriculum_length: usize,
        seconds: f64,
    },
    Final {
        iteration: u64,
        epoch: u64,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    EarlyStopping,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations: u64,
    pub epochs: u64,
    pub reason: StopReason,
    pub steps: Vec<StepRecord>,
    pub best_val: Option<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: Adam,
    noise: Noise,
    train: Vec<FrameSequence>,
    val: Vec<FrameSequence>,
    run_dir: PathBuf,
    iteration: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    stopper: EarlyStopping,
    epoch_bound_sum: f64,
    epoch_batches: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: Vec<FrameSequence>, val: Vec<FrameSequence>, run_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        for s in train.iter().chain(&val) {
            if (s.height, s.width) != (cfg.model.frame_height, cfg.model.frame_width) {
                return Err(Error::Shape(format!(
                    "dataset frames are {}x{}, model expects {}x{}",
                    s.height, s.width, cfg.model.frame_height, cfg.model.frame_width
                )));
            }
        }
        fs::create_dir_all(run_dir)?;
        let dtype = cfg.precision.dtype();
        let model = Model::new(cfg.model.clone(), dtype, init_seed(cfg.seed))?;
        let adam = Adam::new(cfg.iwae.learning_rate);
        let noise = Noise::new(sampling_seed(cfg.seed), dtype);
        let order = epoch_order(train.len(), cfg.seed, 0);
        let stopper = EarlyStopping::new(cfg.patience);
        fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        Ok(Self {
            cfg,
            model,
            adam,
            noise,
            train,
            val,
            run_dir: run_dir.to_path_buf(),
            iteration: 0,
            epoch: 0,
            cursor: 0,
            order,
            stopper,
            epoch_bound_sum: 0.0,
            epoch_batches: 0,
            started: Instant::now(),
        })
    }

    /// Continues from `run_dir/checkpoint`.
    pub fn resume(run_dir: &Path, train: Vec<FrameSequence>, val: Vec<FrameSequence>) -> Result<Self> {
        let dir = run_dir.join(CHECKPOINT_DIR);
        let (model, m) = load_model(&dir)?;
        let mut t = Self::new(m.config.clone(), train, val, run_dir)?;
        t.model = model;
        t.adam.load(&dir.join(OPTIMIZER_FILE), m.iteration)?;
        t.noise = Noise::from_state(&m.rng, m.config.precision.dtype())?;
        t.iteration = m.iteration;
        t.epoch = m.epoch;
        t.cursor = m.cursor;
        t.order = epoch_order(t.train.len(), t.cfg.seed, t.epoch);
        t.stopper = m.early_stopping;
        t.epoch_bound_sum = m.epoch_bound_sum;
        t.epoch_batches = m.epoch_batches;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn early_stopping(&self) -> &EarlyStopping {
        &self.stopper
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.epoch_done() {
            self.finish_epoch()?;
        }
        let b = self.cfg.iwae.batch_size;
        let end = (self.cursor + b).min(self.order.len());
        let batch: Vec<&FrameSequence> = self.order[self.cursor..end].iter().map(|&i| &self.train[i]).collect();
        let len = self.cfg.curriculum.length(self.iteration).min(batch.iter().map(|s| s.len()).min().unwrap_or(0));
        let frames = stack_frames(&batch, len, self.model.dtype())?;
        let temperature = self.cfg.temperature.at(self.iteration);
        let out = iwae_bound(
            &self.model,
            &frames,
            self.cfg.iwae.particles,
            &mut self.noise,
            PresenceMode::StraightThrough { temperature },
        )?;
        let bound = out.bound.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = out.bound.neg()?.backward()?;
        let grad_norm = self.adam.apply(self.model.params(), &grads, self.cfg.iwae.clip_norm)?;
        self.iteration += 1;
        self.cursor = end;
        self.epoch_bound_sum += bound;
        self.epoch_batches += 1;
        Ok(StepRecord { iteration: self.iteration, bound, grad_norm, sequence_length: len, temperature })
    }

    fn epoch_done(&self) -> bool {
        self.cursor >= self.order.len()
    }

    /// Validation bound with exact presence samples, from a stream that
    /// depends only on the seed and the epoch.
    pub fn validate(&self) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(f64::NAN);
        }
        let mut noise = Noise::new(validation_seed(self.cfg.seed, self.epoch), self.model.dtype());
        let len = self.cfg.curriculum.length(self.iteration).min(self.val.iter().map(|s| s.len()).min().unwrap_or(0));
        let mut total = 0.0;
        for chunk in self.val.chunks(self.cfg.iwae.batch_size) {
            let refs: Vec<&FrameSequence> = chunk.iter().collect();
            let frames = stack_frames(&refs, len, self.model.dtype())?;
            let out = iwae_bound(&self.model, &frames, self.cfg.iwae.particles, &mut noise, PresenceMode::Hard)?;
            total += out.bound.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }

    fn log(&self, record: &MetricsRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.run_dir.join(METRICS_FILE))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    fn manifest(&self) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            version: CHECKPOINT_VERSION,
            config_hash: self.cfg.hash()?,
            config: self.cfg.clone(),
            model: if self.cfg.is_baseline() { "sqair-baseline".into() } else { format!("r-sqair-{}", self.cfg.model.relational.kind) },
            baseline: self.cfg.is_baseline(),
            iteration: self.iteration,
            epoch: self.epoch,
            cursor: self.cursor,
            curriculum_length: self.cfg.curriculum.length(self.iteration),
            best_val: self.stopper.best,
            early_stopping: self.stopper.clone(),
            rng: self.noise.state(),
            epoch_bound_sum: self.epoch_bound_sum,
            epoch_batches: self.epoch_batches,
            weights_sha256: self.model.params().checksum()?,
        })
    }

    fn write_checkpoint(&self, dir: &Path, with_optimizer: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.params().save(&dir.join(WEIGHTS_FILE))?;
        if with_optimizer {
            self.adam.save(&dir.join(OPTIMIZER_FILE))?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest()?)?)?;
        Ok(())
    }

    /// Writes the resumable checkpoint under `run_dir/checkpoint`.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.run_dir.join(CHECKPOINT_DIR);
        self.write_checkpoint(&dir, true)?;
        Ok(dir)
    }

    fn finish_epoch(&mut self) -> Result<bool> {
        let val = self.validate()?;
        let train_bound = self.epoch_bound_sum / self.epoch_batches.max(1) as f64;
        let stop = if val.is_finite() { self.stopper.update(val) } else { false };
        if self.stopper.improved_last() {
            self.write_checkpoint(&self.run_dir.join(BEST_DIR), false)?;
        }
        self.log(&MetricsRecord::Epoch {
            epoch: self.epoch,
            iteration: self.iteration,
            train_bound,
            val_bound: val,
            best_val: self.stopper.best.unwrap_or(f64::NAN),
            curriculum_length: self.cfg.curriculum.length(self.iteration),
            seconds: self.started.elapsed().as_secs_f64(),
        })?;
        self.epoch += 1;
        self.cursor = 0;
        self.order = epoch_order(self.train.len(), self.cfg.seed, self.epoch);
        self.epoch_bound_sum = 0.0;
        self.epoch_batches = 0;
        Ok(stop)
    }

    /// Trains until the iteration cap (absolute, counted from the start of
    /// the run) or early stopping.
    pub fn run(&mut self, max_iterations: Option<u64>) -> Result<TrainSummary> {
        let cap = max_iterations.or(self.cfg.max_iterations);
        let mut steps = Vec::new();
        let reason = loop {
            if cap.is_some_and(|c| self.iteration >= c) {
                break StopReason::MaxIterations;
            }
            let rec = self.step()?;
            if self.cfg.log_every > 0 && rec.iteration % self.cfg.log_every == 0 {
                self.log(&MetricsRecord::Step(rec.clone()))?;
            }
            steps.push(rec);
            if self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint()?;
            }
            if self.epoch_done() && self.finish_epoch()? {
                break StopReason::EarlyStopping;
            }
        };
        self.save_checkpoint()?;
        if !self.run_dir.join(BEST_DIR).join(WEIGHTS_FILE).exists() {
            self.write_checkpoint(&self.run_dir.join(BEST_DIR), false)?;
        }
        let reason_text = serde_json::to_value(&reason)?.as_str().unwrap_or_default().to_string();
        self.log(&MetricsRecord::Final { iteration: self.iteration, epoch: self.epoch, reason: reason_text })?;
        Ok(TrainSummary { iterations: self.iteration, epochs: self.epoch, reason, steps, best_val: self.stopper.best })
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn curriculum_closed_form() {
        assert_eq!(curriculum_length(0), 3);
        assert_eq!(curriculum_length(9_999), 3);
        assert_eq!(curriculum_length(10_000), 4);
        assert_eq!(curriculum_length(1_000_000), 10);
    }

    #[test]
    fn early_stopping_counts_non_improving_epochs() {
        let mut es = EarlyStopping::new(10);
        assert!(!es.update(-5.0));
        for i in 1..10 {
            assert!(!es.update(-5.0), "stopped early at {i}");
        }
        assert!(es.update(-5.0));
    }

    #[test]
    fn log_mean_exp_of_constants() {
        let w = Tensor::new(&[[3.5f64, 3.5, 3.5], [-1e4, -1e4, -1e4]], &Device::Cpu).unwrap();
        let v = log_mean_exp(&w).unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 3.5).abs() < 1e-12);
        assert!((v[1] + 1e4).abs() < 1e-9);
    }

    #[test]
    fn temperature_endpoints() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(10_000) - 0.3).abs() < 1e-12);
        assert!((s.at(50_000) - 0.3).abs() < 1e-12);
    }
}
