use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of `z_where` components: `(s_x, s_y, t_x, t_y)`.
pub const WHERE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationalKind {
    /// `γ = z_{t-1}`; recovers plain SQAIR.
    Identity,
    /// Interaction network with attention-weighted effect sums.
    In,
    /// Relational memory core.
    Rmc,
}

impl RelationalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RelationalKind::Identity => "identity",
            RelationalKind::In => "in",
            RelationalKind::Rmc => "rmc",
        }
    }
}

impl std::str::FromStr for RelationalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "in" => Ok(Self::In),
            "rmc" => Ok(Self::Rmc),
            other => Err(Error::InvalidArgument(format!(
                "unknown relational module {other:?} (expected identity | in | rmc)"
            ))),
        }
    }
}

impl std::fmt::Display for RelationalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationalConfig {
    pub kind: RelationalKind,
    /// Node/edge embedding width of the interaction network (also its effect width).
    pub in_embed: usize,
    /// Hidden width of the interaction network's two-layer maps.
    pub in_hidden: usize,
    pub rmc_heads: usize,
    pub rmc_head_dim: usize,
    pub rmc_mlp_hidden: usize,
}

impl Default for RelationalConfig {
    fn default() -> Self {
        Self {
            kind: RelationalKind::Identity,
            in_embed: 5,
            in_hidden: 32,
            rmc_heads: 4,
            rmc_head_dim: 10,
            rmc_mlp_hidden: 40,
        }
    }
}

impl RelationalConfig {
    pub fn memory_dim(&self) -> usize {
        self.rmc_heads * self.rmc_head_dim
    }

    /// Width of the effect part of each γ row.
    pub fn effect_dim(&self) -> usize {
        match self.kind {
            RelationalKind::Identity => 0,
            RelationalKind::In => self.in_embed,
            RelationalKind::Rmc => self.memory_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Maximum number of objects per frame (K).
    pub slots: usize,
    pub what_dim: usize,
    pub glimpse_size: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub encoder_hidden: usize,
    pub core_hidden: usize,
    pub temporal_hidden: usize,
    pub glimpse_hidden: usize,
    pub decoder_hidden: usize,
    pub head_hidden: usize,
    pub prior_hidden: usize,
    /// Observation noise of the Gaussian pixel likelihood.
    pub obs_std: f64,
    /// Termination probability of the geometric count prior.
    pub count_theta: f64,
    pub std_floor: f64,
    /// Smallest window scale; keeps every attention window invertible.
    pub min_scale: f64,
    /// Window scale the where-heads start from.
    pub init_scale: f64,
    /// Initial presence logit of the discovery head.
    pub init_pres_logit: f64,
    pub relational: RelationalConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            slots: 4,
            what_dim: 5,
            glimpse_size: 20,
            frame_height: 50,
            frame_width: 50,
            encoder_hidden: 64,
            core_hidden: 64,
            temporal_hidden: 64,
            glimpse_hidden: 64,
            decoder_hidden: 64,
            head_hidden: 64,
            prior_hidden: 32,
            obs_std: 0.3,
            count_theta: 0.75,
            std_floor: 1e-4,
            min_scale: 0.02,
            init_scale: 0.4,
            init_pres_logit: 2.0,
            relational: RelationalConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Length of one object's canonical latent vector `z_what ‖ z_where ‖ z_pres`.
    pub fn latent_dim(&self) -> usize {
        self.what_dim + WHERE_DIM + 1
    }

    pub fn gamma_dim(&self) -> usize {
        self.latent_dim() + self.relational.effect_dim()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_height * self.frame_width
    }

    pub fn glimpse_len(&self) -> usize {
        self.glimpse_size * self.glimpse_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.what_dim == 0 || self.glimpse_size == 0 || self.frame_height == 0 || self.frame_width == 0 {
            return bad("dimensions must be positive");
        }
        if !(self.obs_std > 0.0) {
            return bad("obs_std must be positive");
        }
        if !(self.count_theta > 0.0 && self.count_theta <= 1.0) {
            return bad("count_theta must lie in (0, 1]");
        }
        if !(self.min_scale > 0.0 && self.min_scale < self.init_scale && self.init_scale < 1.0) {
            return bad("need 0 < min_scale < init_scale < 1");
        }
        if !(self.std_floor > 0.0) {
            return bad("std_floor must be positive");
        }
        if self.relational.kind == RelationalKind::Rmc
            && (self.relational.rmc_heads == 0 || self.relational.rmc_head_dim == 0)
        {
            return bad("relational memory needs heads and head_dim");
        }
        Ok(())
    }
}
