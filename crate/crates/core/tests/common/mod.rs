#![allow(dead_code)]

use ballsim::{generate_split, BallCount, GenerateConfig, SplitSpec};
use rsqair::scene::FrameSequence;

/// In-memory bouncing-balls split with `sequences` videos of `frames` frames.
pub fn balls_split(seed: u64, sequences: u32, balls: u8, frames: u32) -> Vec<FrameSequence> {
    let config = GenerateConfig {
        seed,
        frames,
        splits: vec![SplitSpec { name: "train".into(), sequences, balls: BallCount::Fixed(balls) }],
        ..GenerateConfig::default()
    };
    let ds = generate_split(&config, 0).expect("generate split");
    ds.sequences.iter().map(|r| FrameSequence::from_record(&ds.header, r)).collect()
}

/// A small model that runs in milliseconds, for exact and statistical checks.
pub fn tiny_config(kind: rsqair::RelationalKind) -> rsqair::ModelConfig {
    let mut cfg = rsqair::ModelConfig {
        slots: 3,
        what_dim: 3,
        glimpse_size: 6,
        frame_height: 16,
        frame_width: 16,
        encoder_hidden: 8,
        core_hidden: 8,
        temporal_hidden: 8,
        glimpse_hidden: 8,
        decoder_hidden: 8,
        head_hidden: 8,
        prior_hidden: 8,
        ..rsqair::ModelConfig::default()
    };
    cfg.relational.kind = kind;
    cfg.relational.in_hidden = 8;
    cfg.relational.rmc_heads = 2;
    cfg.relational.rmc_head_dim = 3;
    cfg.relational.rmc_mlp_hidden = 8;
    cfg
}

/// Seeded uniform frames `(B, T, H, W)`.
pub fn random_frames(seed: u64, shape: (usize, usize, usize, usize), dtype: candle_core::DType) -> candle_core::Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    candle_core::Tensor::from_vec(data, shape, &candle_core::Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

/// Ball-free `16 × 16` sequences of uniform noise, sized for [`tiny_config`].
pub fn tiny_sequences(seed: u64, count: usize, frames: usize) -> Vec<FrameSequence> {
    let t = random_frames(seed, (count, frames, 16, 16), candle_core::DType::F32);
    (0..count)
        .map(|i| FrameSequence {
            frames: t.get(i).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            height: 16,
            width: 16,
            collisions: vec![Vec::new(); frames],
            positions: vec![Vec::new(); frames],
            ball_count: 0,
            raw_size: 16,
        })
        .collect()
}

/// Training config around [`tiny_config`] with small batches and no periodic
/// logging or checkpoints.
pub fn tiny_train_config(kind: rsqair::RelationalKind) -> rsqair::training::TrainConfig {
    let mut cfg = rsqair::training::TrainConfig {
        model: tiny_config(kind),
        log_every: 1,
        checkpoint_every: 0,
        ..Default::default()
    };
    cfg.iwae.batch_size = 4;
    cfg.iwae.particles = 2;
    cfg.iwae.learning_rate = 1e-3;
    cfg
}
