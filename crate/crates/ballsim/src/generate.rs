use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetHeader, SequenceRecord, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::physics::{simulate, SimConfig};
use crate::render::{crop_center, quantize, render_frame, CROP_SIZE};
use crate::seed::sequence_seed;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallCount {
    Fixed(u8),
    /// Uniform over the inclusive range.
    Range(u8, u8),
}

impl BallCount {
    pub fn max(&self) -> u8 {
        match *self {
            BallCount::Fixed(n) => n,
            BallCount::Range(_, hi) => hi,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            BallCount::Fixed(0) => Err(Error::Config("ball count must be positive".into())),
            BallCount::Range(lo, hi) if lo == 0 || lo > hi => {
                Err(Error::Config(format!("bad ball range {lo}..={hi}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub sequences: u32,
    pub balls: BallCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub frames: u32,
    pub splits: Vec<SplitSpec>,
    pub physics: SimConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let split = |name: &str, sequences, balls| SplitSpec { name: name.into(), sequences, balls };
        Self {
            seed: 0,
            frames: 10,
            splits: vec![
                split("train", 10_000, BallCount::Fixed(4)),
                split("val", 1_000, BallCount::Fixed(4)),
                split("test", 1_000, BallCount::Fixed(4)),
                split("gen-test", 1_000, BallCount::Range(6, 8)),
            ],
            physics: SimConfig::default(),
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        if self.frames == 0 {
            return Err(Error::Config("need at least one frame".into()));
        }
        for s in &self.splits {
            s.balls.validate()?;
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("bad split name {:?}", s.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub split: String,
    pub path: String,
    pub sha256: String,
    pub sequences: u32,
    pub ball_counts: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: GenerateConfig,
    pub format_version: u32,
    pub seed_rule: String,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }

    pub fn file(&self, split: &str) -> Option<&ManifestFile> {
        self.files.iter().find(|f| f.split == split)
    }
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.rsqb"))
}

/// Simulates and encodes one split in memory. `split_index` selects the seed
/// stream (its position in the config's split list).
pub fn generate_split(config: &GenerateConfig, split_index: usize) -> Result<Dataset> {
    let spec = &config.splits[split_index];
    let t = config.frames as usize;
    let max_balls = spec.balls.max() as usize;
    let mut sequences = Vec::with_capacity(spec.sequences as usize);
    for index in 0..spec.sequences {
        let seed = sequence_seed(config.seed, split_index as u32, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let balls = match spec.balls {
            BallCount::Fixed(n) => n,
            BallCount::Range(lo, hi) => rng.random_range(lo..=hi),
        };
        let (traj, ann) = simulate(balls as usize, t, rng.random(), &config.physics)?;
        let mut frames = Vec::with_capacity(t * CROP_SIZE * CROP_SIZE);
        let mut collisions = vec![0u8; t * max_balls];
        let mut trajectories = vec![0f32; t * max_balls * 4];
        for (ti, state) in traj.states.iter().enumerate() {
            let crop = crop_center(&render_frame(state))?;
            frames.extend(crop.into_iter().map(quantize));
            for (b, ball) in state.iter().enumerate() {
                collisions[ti * max_balls + b] = u8::from(ann.flags[ti][b]);
                let base = (ti * max_balls + b) * 4;
                trajectories[base..base + 4].copy_from_slice(&[
                    ball.position[0] as f32,
                    ball.position[1] as f32,
                    ball.velocity[0] as f32,
                    ball.velocity[1] as f32,
                ]);
            }
        }
        sequences.push(SequenceRecord { balls, frames, collisions, trajectories });
    }
    Ok(Dataset {
        header: DatasetHeader {
            version: FORMAT_VERSION,
            sequences: spec.sequences,
            frames: config.frames,
            height: CROP_SIZE as u32,
            width: CROP_SIZE as u32,
            max_balls: max_balls as u32,
        },
        sequences,
    })
}

/// Writes one `<split>.rsqb` per split plus `manifest.json` into `out_dir`.
pub fn generate_dataset(config: &GenerateConfig, out_dir: &Path, force: bool) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut targets: Vec<PathBuf> = config.splits.iter().map(|s| split_path(out_dir, &s.name)).collect();
    targets.push(out_dir.join(MANIFEST_FILE));
    if !force {
        if let Some(existing) = targets.iter().find(|p| p.exists()) {
            return Err(Error::Exists(existing.clone()));
        }
    }

    let mut files = Vec::with_capacity(config.splits.len());
    for (i, spec) in config.splits.iter().enumerate() {
        let ds = generate_split(config, i)?;
        let path = split_path(out_dir, &spec.name);
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes)?;
        fs::write(&path, &bytes)?;
        files.push(ManifestFile {
            split: spec.name.clone(),
            path: path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            sequences: spec.sequences,
            ball_counts: ds.sequences.iter().map(|s| s.balls).collect(),
        });
    }
    let manifest = Manifest {
        generator: config.clone(),
        format_version: FORMAT_VERSION,
        seed_rule: "sequence_seed = splitmix64(seed ^ splitmix64((split_index << 32) | sequence_index))"
            .into(),
        files,
    };
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenerateConfig {
        GenerateConfig {
            seed,
            frames: 4,
            splits: vec![
                SplitSpec { name: "train".into(), sequences: 5, balls: BallCount::Fixed(3) },
                SplitSpec { name: "gen-test".into(), sequences: 20, balls: BallCount::Range(6, 8) },
            ],
            physics: SimConfig::default(),
        }
    }

    #[test]
    fn range_split_uses_only_allowed_counts() {
        let ds = generate_split(&small(1), 1).unwrap();
        assert_eq!(ds.header.max_balls, 8);
        assert!(ds.sequences.iter().all(|s| (6..=8).contains(&s.balls)));
    }

    #[test]
    fn refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&small(2), dir.path(), false).unwrap();
        assert!(matches!(generate_dataset(&small(2), dir.path(), false), Err(Error::Exists(_))));
        generate_dataset(&small(2), dir.path(), true).unwrap();
    }

    #[test]
    fn invalid_config() {
        let mut cfg = small(0);
        cfg.splits[0].balls = BallCount::Range(5, 2);
        assert!(cfg.validate().is_err());
        cfg = small(0);
        cfg.frames = 0;
        assert!(cfg.validate().is_err());
    }
}
