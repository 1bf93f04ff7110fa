//! Final-frame log-likelihood metrics and their aggregation over models and
//! samples.
//!
//! Each sequence is filtered over its first `T − 1` frames, the last frame is
//! predicted by one step of the propagation prior (or reconstructed by the
//! posterior when requested), and the observed last frame is scored under the
//! Gaussian observation model.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::dist::PresenceMode;
use crate::dynamics::Model;
use crate::error::{Error, Result};
use crate::noise::Noise;
use crate::scene::{stack_frames, FrameSequence};

pub const REPORT_SCHEMA: &str = "rsqair.metrics/1";
/// Note attached to the relational metric when no sequence collides at its
/// final frame.
pub const NO_COLLISIONS: &str = "no collisions";

/// Where the scored mean image of the final frame comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalFrame {
    /// One step of the propagation prior after filtering `T − 1` frames.
    #[default]
    Prior,
    /// Posterior reconstruction after filtering all `T` frames.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub final_frame: FinalFrame,
    /// Ball radius in raw-frame pixels, used for the collision mask.
    pub radius: f64,
    /// Dilation of the collision discs in pixels.
    pub tolerance: f64,
    /// Sequences evaluated together (each repeated `samples` times).
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 5, seed: 0, final_frame: FinalFrame::Prior, radius: 6.0, tolerance: 0.5, batch_size: 32 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("samples and batch_size must be positive".into()));
        }
        if !(self.radius > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("radius must be positive and tolerance non-negative".into()));
        }
        Ok(())
    }
}

/// Which pixels of the final frame the relational metric scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskRule {
    /// Pixels whose centre lies within `radius + tolerance` of a ball that
    /// collides at the final frame.
    Collisions { radius: f64, tolerance: f64 },
    /// Every pixel of every sequence.
    All,
}

/// Per-pixel Gaussian log-density summed over the pixels selected by `mask`.
pub fn frame_loglik(x: &[f32], mean: &[f32], std: f64, mask: Option<&[bool]>) -> f64 {
    let norm = -std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for (i, (&xv, &mv)) in x.iter().zip(mean).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            let z = (f64::from(xv) - f64::from(mv)) / std;
            total += norm - 0.5 * z * z;
        }
    }
    total
}

/// Collision-disc mask of frame `t`, or `None` when no ball collides there.
pub fn collision_mask(seq: &FrameSequence, t: usize, radius: f64, tolerance: f64) -> Option<Vec<bool>> {
    let centres: Vec<[f64; 2]> = (0..seq.ball_count)
        .filter(|&b| seq.collisions[t][b])
        .map(|b| seq.positions[t][b])
        .collect();
    if centres.is_empty() {
        return None;
    }
    let off_y = (seq.raw_size as f64 - seq.height as f64) / 2.0;
    let off_x = (seq.raw_size as f64 - seq.width as f64) / 2.0;
    let reach = radius + tolerance;
    let mut mask = Vec::with_capacity(seq.height * seq.width);
    for i in 0..seq.height {
        for j in 0..seq.width {
            let (px, py) = (j as f64 + 0.5 + off_x, i as f64 + 0.5 + off_y);
            mask.push(centres.iter().any(|c| (px - c[0]).hypot(py - c[1]) <= reach));
        }
    }
    Some(mask)
}

/// Mean images of the final frame, indexed `[sequence][sample]`.
pub fn final_frame_means(model: &Model, seqs: &[FrameSequence], cfg: &EvalConfig, seed: u64) -> Result<Vec<Vec<Vec<f32>>>> {
    cfg.validate()?;
    let t = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    if t < 2 {
        return Err(Error::InvalidArgument("evaluation needs sequences of at least two frames".into()));
    }
    let s = cfg.samples;
    let mut noise = Noise::new(seed, model.dtype());
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(cfg.batch_size) {
        let refs: Vec<&FrameSequence> = chunk.iter().collect();
        let frames = stack_frames(&refs, t, model.dtype())?;
        let repeat: Vec<u32> = (0..chunk.len() as u32).flat_map(|b| std::iter::repeat(b).take(s)).collect();
        let idx = Tensor::new(repeat.as_slice(), frames.device())?;
        let frames = frames.index_select(&idx, 0)?;
        let mean = match cfg.final_frame {
            FinalFrame::Prior => {
                let observed = frames.narrow(1, 0, t - 1)?;
                let filtered = model.filter_sequence(&observed, &mut noise, PresenceMode::Hard)?;
                let last = filtered.scenes.last().ok_or_else(|| Error::Shape("no filtered frames".into()))?;
                let mut rolled = model.rollout_prior(last, 1, &mut noise)?;
                rolled.pop().ok_or_else(|| Error::Shape("empty rollout".into()))?.1
            }
            FinalFrame::Posterior => {
                let mut filtered = model.filter_sequence(&frames, &mut noise, PresenceMode::Hard)?;
                filtered.means.pop().ok_or_else(|| Error::Shape("no filtered frames".into()))?
            }
        };
        let rows = mean.flatten_from(1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for b in 0..chunk.len() {
            out.push(rows[b * s..(b + 1) * s].to_vec());
        }
    }
    Ok(out)
}

/// Per-sample scores of one model, each averaged over the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub data_ll: Vec<f64>,
    /// `None` when no sequence collides at its final frame.
    pub relational_ll: Option<Vec<f64>>,
    pub colliding_sequences: usize,
}

/// Scores precomputed final-frame means against the observed final frames.
pub fn score_means(
    seqs: &[FrameSequence],
    means: &[Vec<Vec<f32>>],
    obs_std: f64,
    rule: MaskRule,
) -> Result<SampleScores> {
    if seqs.is_empty() || seqs.len() != means.len() {
        return Err(Error::InvalidArgument("need one set of means per sequence".into()));
    }
    let samples = means[0].len();
    let masks: Vec<Option<Vec<bool>>> = seqs
        .iter()
        .map(|s| {
            let t = s.len() - 1;
            match rule {
                MaskRule::Collisions { radius, tolerance } => collision_mask(s, t, radius, tolerance),
                MaskRule::All => Some(vec![true; s.height * s.width]),
            }
        })
        .collect();
    let colliding = masks.iter().filter(|m| m.is_some()).count();
    let mut data_ll = vec![0.0; samples];
    let mut rel_ll = vec![0.0; samples];
    for (seq, (per_sample, mask)) in seqs.iter().zip(means.iter().zip(&masks)) {
        let observed = seq.frame(seq.len() - 1);
        for (k, mean) in per_sample.iter().enumerate() {
            data_ll[k] += frame_loglik(observed, mean, obs_std, None);
            if let Some(m) = mask {
                rel_ll[k] += frame_loglik(observed, mean, obs_std, Some(m));
            }
        }
    }
    let n = seqs.len() as f64;
    data_ll.iter_mut().for_each(|v| *v /= n);
    let relational_ll = (colliding > 0).then(|| rel_ll.iter().map(|v| v / colliding as f64).collect());
    Ok(SampleScores { data_ll, relational_ll, colliding_sequences: colliding })
}

/// Average final-frame log-likelihood over the dataset and `samples` draws.
pub fn data_loglik(model: &Model, seqs: &[FrameSequence], cfg: &EvalConfig) -> Result<f64> {
    let scores = sample_scores(model, seqs, cfg, MaskRule::All, cfg.seed)?;
    Ok(mean(&scores.data_ll))
}

/// Final-frame log-likelihood restricted to colliding balls, averaged over
/// the sequences that collide at their final frame. `None` means no such
/// sequence exists.
pub fn relational_loglik(model: &Model, seqs: &[FrameSequence], cfg: &EvalConfig) -> Result<Option<f64>> {
    relational_loglik_with(model, seqs, cfg, MaskRule::Collisions { radius: cfg.radius, tolerance: cfg.tolerance })
}

pub fn relational_loglik_with(
    model: &Model,
    seqs: &[FrameSequence],
    cfg: &EvalConfig,
    rule: MaskRule,
) -> Result<Option<f64>> {
    let scores = sample_scores(model, seqs, cfg, rule, cfg.seed)?;
    Ok(scores.relational_ll.as_deref().map(mean))
}

fn sample_scores(model: &Model, seqs: &[FrameSequence], cfg: &EvalConfig, rule: MaskRule, seed: u64) -> Result<SampleScores> {
    let means = final_frame_means(model, seqs, cfg, seed)?;
    score_means(seqs, &means, model.config().obs_std, rule)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let m = mean(values);
    if values.len() == 1 {
        return Some((m, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((m, (ss / (values.len() - 1) as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawValue {
    pub model: usize,
    pub sample: usize,
    pub value: f64,
}

/// Raw values of one metric with their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub raw: Vec<RawValue>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Aggregate {
    pub fn from_raw(raw: Vec<RawValue>, note: Option<String>) -> Self {
        let values: Vec<f64> = raw.iter().map(|r| r.value).collect();
        let (mean, std) = match mean_std(&values) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        Self { raw, mean, std, note }
    }

    /// Whether `mean` and `std` are exactly what the raw values give.
    pub fn is_consistent(&self) -> bool {
        let again = Self::from_raw(self.raw.clone(), self.note.clone());
        again.mean.map(f64::to_bits) == self.mean.map(f64::to_bits)
            && again.std.map(f64::to_bits) == self.std.map(f64::to_bits)
    }
}

/// Identity of one evaluated checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub path: String,
    pub model: String,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema: String,
    pub dataset: String,
    pub config: EvalConfig,
    pub checkpoints: Vec<CheckpointInfo>,
    pub sequences: usize,
    pub colliding_sequences: usize,
    /// Distinct ball counts present in the dataset.
    pub ball_counts: Vec<usize>,
    pub data_ll: Aggregate,
    pub relational_ll: Aggregate,
}

impl MetricsReport {
    pub fn is_consistent(&self) -> bool {
        self.data_ll.is_consistent() && self.relational_ll.is_consistent()
    }
}

/// Seed of the sampling stream for model `index`.
pub fn model_seed(seed: u64, index: usize) -> u64 {
    ballsim::seed::stream_seed(seed, &format!("eval/{index}"))
}

/// Runs every model over the dataset with `samples` draws each and collects
/// `models × samples` raw values per metric. Models are only read.
pub fn evaluate_protocol(
    models: &[(&Model, CheckpointInfo)],
    seqs: &[FrameSequence],
    dataset: &str,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("at least one checkpoint is required".into()));
    }
    let rule = MaskRule::Collisions { radius: cfg.radius, tolerance: cfg.tolerance };
    let mut data_raw = Vec::new();
    let mut rel_raw = Vec::new();
    let mut colliding = 0;
    for (m, (model, _)) in models.iter().enumerate() {
        let scores = sample_scores(model, seqs, cfg, rule, model_seed(cfg.seed, m))?;
        colliding = scores.colliding_sequences;
        for (sample, &value) in scores.data_ll.iter().enumerate() {
            data_raw.push(RawValue { model: m, sample, value });
        }
        if let Some(rel) = &scores.relational_ll {
            for (sample, &value) in rel.iter().enumerate() {
                rel_raw.push(RawValue { model: m, sample, value });
            }
        }
    }
    let mut ball_counts: Vec<usize> = seqs.iter().map(|s| s.ball_count).collect();
    ball_counts.sort_unstable();
    ball_counts.dedup();
    let note = (colliding == 0).then(|| NO_COLLISIONS.to_string());
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.into(),
        dataset: dataset.into(),
        config: cfg.clone(),
        checkpoints: models.iter().map(|(_, info)| info.clone()).collect(),
        sequences: seqs.len(),
        colliding_sequences: colliding,
        ball_counts,
        data_ll: Aggregate::from_raw(data_raw, None),
        relational_ll: Aggregate::from_raw(rel_raw, note),
    })
}

/// The same protocol on a split with more balls than the models were
/// trained on; model hyperparameters stay as they are.
pub fn generalization_eval(
    models: &[(&Model, CheckpointInfo)],
    seqs: &[FrameSequence],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    evaluate_protocol(models, seqs, "gen-test", cfg)
}
