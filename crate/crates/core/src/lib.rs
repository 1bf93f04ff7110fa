//! Relational sequential attend-infer-repeat: a generative model of object
//! sequences whose propagation step is conditioned on pairwise interactions.

pub mod air;
pub mod config;
pub mod dist;
pub mod dynamics;
mod error;
pub mod eval;
pub mod glimpse;
pub mod nn;
pub mod noise;
pub mod relational;
pub mod scene;
pub mod training;
pub mod viz;

pub use config::{ModelConfig, RelationalConfig, RelationalKind};
pub use dynamics::{ContextRoute, FilterOutput, FrameTerms, Model};
pub use error::{Error, Result};
