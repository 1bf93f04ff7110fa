//! Bouncing-balls video generator.
//!
//! Balls move at constant speed on a 64×64 canvas, bounce elastically off each
//! other and off the walls, and are rasterized as anti-aliased white discs. The
//! central 50×50 window is kept, so balls can drift partly out of view. Every
//! frame carries a per-ball collision flag that evaluation uses as ground truth.

mod error;

pub mod dataset;
pub mod generate;
pub mod physics;
pub mod render;
pub mod seed;

pub use dataset::{Dataset, DatasetHeader, SequenceRecord, FORMAT_VERSION, MAGIC};
pub use error::{Error, Result};
pub use generate::{
    generate_dataset, generate_split, split_path, BallCount, GenerateConfig, Manifest, ManifestFile,
    SplitSpec, MANIFEST_FILE,
};
pub use physics::{
    annotate_collisions, simulate, simulate_from, BallState, CollisionAnnotation,
    CollisionEvent, SimConfig, Trajectory,
};
pub use render::{
    crop_center, pad_back, quantize, render_frame, render_frame_sized, CROP_OFFSET, CROP_SIZE, RAW_SIZE,
};
