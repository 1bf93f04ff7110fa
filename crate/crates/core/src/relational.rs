//! Relational modules Γ mapping the previous frame's object latents to
//! per-object context rows `γ_k = [z_k ; e_k]`.
//!
//! All three variants take `latents (N, K, L)` and presence `pres (N, K)` and
//! return `γ (N, K, L + E)`. Absent objects neither receive nor exert effects.

use candle_core::{Tensor, D};

use crate::config::{ModelConfig, RelationalKind};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear, Mlp, ParamStore};

pub const PARAM_PREFIX: &str = "relational.";

#[derive(Debug, Clone)]
pub struct RelationalOutput {
    /// `(N, K, L + E)`
    pub gamma: Tensor,
    /// Updated memory `(N, K, M)` for the relational memory core.
    pub memory: Option<Tensor>,
}

/// `γ = z`: exact pass-through with an empty effect part.
pub fn gamma_identity(latents: &Tensor) -> Result<RelationalOutput> {
    Ok(RelationalOutput { gamma: latents.clone(), memory: None })
}

#[derive(Debug, Clone)]
pub enum RelationalModule {
    Identity,
    Interaction(InteractionNet),
    Memory(RelationalMemory),
}

impl RelationalModule {
    pub fn build(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let rc = &cfg.relational;
        Ok(match rc.kind {
            RelationalKind::Identity => Self::Identity,
            RelationalKind::In => Self::Interaction(InteractionNet::build(
                ps,
                &format!("{PARAM_PREFIX}in"),
                cfg.latent_dim(),
                rc.in_embed,
                rc.in_hidden,
            )?),
            RelationalKind::Rmc => Self::Memory(RelationalMemory::build(
                ps,
                &format!("{PARAM_PREFIX}rmc"),
                cfg.latent_dim(),
                rc.rmc_heads,
                rc.rmc_head_dim,
                rc.rmc_mlp_hidden,
            )?),
        })
    }

    pub fn kind(&self) -> RelationalKind {
        match self {
            Self::Identity => RelationalKind::Identity,
            Self::Interaction(_) => RelationalKind::In,
            Self::Memory(_) => RelationalKind::Rmc,
        }
    }

    pub fn effect_dim(&self) -> usize {
        match self {
            Self::Identity => 0,
            Self::Interaction(net) => net.embed,
            Self::Memory(core) => core.memory_dim(),
        }
    }

    pub fn memory_dim(&self) -> Option<usize> {
        match self {
            Self::Memory(core) => Some(core.memory_dim()),
            _ => None,
        }
    }

    pub fn forward(&self, latents: &Tensor, pres: &Tensor, memory: Option<&Tensor>) -> Result<RelationalOutput> {
        match self {
            Self::Identity => gamma_identity(latents),
            Self::Interaction(net) => net.forward(latents, pres),
            Self::Memory(core) => {
                let memory = memory.ok_or_else(|| Error::Shape("relational memory core needs a memory".into()))?;
                core.forward(latents, pres, memory)
            }
        }
    }
}

/// Trainable scalars of the relational module in `ps` (zero for identity).
pub fn count_params(ps: &ParamStore) -> usize {
    ps.count(PARAM_PREFIX)
}

/// Interaction network:
/// `ẑ_k = f(z_k)`, `ξ_{k,i} = g([ẑ_k; ẑ_i])`,
/// `e_k = Σ_{i≠k} g_att(ξ_{k,i}) · g_eff(ξ_{k,i})`, `γ_k = [z_k; e_k]`.
#[derive(Debug, Clone)]
pub struct InteractionNet {
    f: Mlp,
    g: Mlp,
    g_att: Linear,
    g_eff: Mlp,
    embed: usize,
}

/// Intermediate values of one interaction-network pass.
#[derive(Debug, Clone)]
pub struct InteractionParts {
    /// `(N, K, e)` node embeddings.
    pub node: Tensor,
    /// `(N, K, K, e)` directional pair embeddings, `[.., k, i, ..] = ξ_{k,i}`.
    pub pair: Tensor,
    /// `(N, K, K)` attention coefficients in [0, 1].
    pub attention: Tensor,
    /// `(N, K, K, e)` unweighted effects.
    pub effect: Tensor,
    /// `(N, K, K)` 1 where `i ≠ k` and object `i` is present.
    pub mask: Tensor,
}

impl InteractionNet {
    pub fn build(ps: &mut ParamStore, prefix: &str, latent: usize, embed: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            f: ps.mlp(&format!("{prefix}.f"), &[latent, hidden, embed])?,
            g: ps.mlp(&format!("{prefix}.g"), &[2 * embed, hidden, embed])?,
            g_att: ps.linear(&format!("{prefix}.g_att"), embed, 1)?,
            g_eff: ps.mlp(&format!("{prefix}.g_eff"), &[embed, hidden, embed])?,
            embed,
        })
    }

    /// Closed-form parameter count for the given widths.
    pub fn expected_params(latent: usize, embed: usize, hidden: usize) -> usize {
        let layer = |i: usize, o: usize| (i + 1) * o;
        layer(latent, hidden) + layer(hidden, embed)
            + layer(2 * embed, hidden) + layer(hidden, embed)
            + layer(embed, 1)
            + layer(embed, hidden) + layer(hidden, embed)
    }

    pub fn embed(&self) -> usize {
        self.embed
    }

    pub fn parts(&self, latents: &Tensor, pres: &Tensor) -> Result<InteractionParts> {
        let (n, k, _) = latents.dims3()?;
        let e = self.embed;
        let node = self.f.forward(latents)?;
        let receiver = node.unsqueeze(2)?.expand((n, k, k, e))?;
        let sender = node.unsqueeze(1)?.expand((n, k, k, e))?;
        let pair = self.g.forward(&Tensor::cat(&[&receiver, &sender], 3)?.contiguous()?)?;
        let attention = sigmoid(&self.g_att.forward(&pair)?.squeeze(3)?)?;
        let effect = self.g_eff.forward(&pair)?;
        let off_diag = (Tensor::ones((k, k), latents.dtype(), latents.device())?
            - Tensor::eye(k, latents.dtype(), latents.device())?)?;
        let mask = off_diag.unsqueeze(0)?.broadcast_mul(&pres.unsqueeze(1)?)?;
        Ok(InteractionParts { node, pair, attention, effect, mask })
    }

    pub fn forward(&self, latents: &Tensor, pres: &Tensor) -> Result<RelationalOutput> {
        let p = self.parts(latents, pres)?;
        let weight = (p.attention * p.mask)?.unsqueeze(3)?;
        let effects = p.effect.broadcast_mul(&weight)?.sum(2)?;
        let effects = effects.broadcast_mul(&pres.unsqueeze(2)?)?;
        Ok(RelationalOutput { gamma: Tensor::cat(&[latents, &effects], 2)?, memory: None })
    }
}

/// Relational memory core: one multi-head attention pass with queries from
/// the memory and keys/values from `[M ; W_in z]`, a residual feed-forward
/// step and an LSTM-style gated write. Weights are shared across rows, so the
/// parameter count does not depend on the number of slots.
#[derive(Debug, Clone)]
pub struct RelationalMemory {
    input: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    mlp: Mlp,
    gate_input: Linear,
    gate_memory: Linear,
    heads: usize,
    head_dim: usize,
}

impl RelationalMemory {
    pub fn build(
        ps: &mut ParamStore,
        prefix: &str,
        latent: usize,
        heads: usize,
        head_dim: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        let m = heads * head_dim;
        Ok(Self {
            input: ps.linear(&format!("{prefix}.input"), latent, m)?,
            query: ps.linear_no_bias(&format!("{prefix}.query"), m, m)?,
            key: ps.linear_no_bias(&format!("{prefix}.key"), m, m)?,
            value: ps.linear_no_bias(&format!("{prefix}.value"), m, m)?,
            mlp: ps.mlp(&format!("{prefix}.mlp"), &[m, mlp_hidden, m])?,
            gate_input: ps.linear(&format!("{prefix}.gate_input"), m, 2 * m)?,
            gate_memory: ps.linear_no_bias(&format!("{prefix}.gate_memory"), m, 2 * m)?,
            heads,
            head_dim,
        })
    }

    pub fn memory_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, rows, _) = x.dims3()?;
        Ok(x.reshape((n, rows, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights `(N, heads, K, 2K)` over `[memory rows ; input rows]`.
    pub fn attention(&self, latents: &Tensor, pres: &Tensor, memory: &Tensor) -> Result<Tensor> {
        Ok(self.attend(latents, pres, memory)?.0)
    }

    fn attend(&self, latents: &Tensor, pres: &Tensor, memory: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, k, _) = latents.dims3()?;
        if memory.dims() != [n, k, self.memory_dim()] {
            return Err(Error::Shape(format!(
                "memory {:?} does not match {k} slots of width {}",
                memory.dims(),
                self.memory_dim()
            )));
        }
        let x = self.input.forward(latents)?;
        let sources = Tensor::cat(&[memory, &x], 1)?;
        let q = self.split_heads(&self.query.forward(memory)?)?;
        let kk = self.split_heads(&self.key.forward(&sources)?)?;
        let v = self.split_heads(&self.value.forward(&sources)?)?;
        let scores = (q.matmul(&kk.transpose(2, 3)?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        // Presence-weighted softmax: absent keys get exactly zero weight.
        let key_pres = Tensor::cat(&[pres, pres], 1)?.unsqueeze(1)?.unsqueeze(1)?;
        let shift = scores.max_keepdim(D::Minus1)?.detach();
        let weights = scores.broadcast_sub(&shift)?.exp()?.broadcast_mul(&key_pres)?;
        // Rows without any present key divide by 1 instead of 0. An epsilon is
        // not enough: its square underflows in f32 and the backward pass of the
        // division turns into 0/0.
        let empty = key_pres.sum_keepdim(D::Minus1)?.eq(0.0)?.to_dtype(scores.dtype())?;
        let attn = weights.broadcast_div(&weights.sum_keepdim(D::Minus1)?.broadcast_add(&empty)?)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, k, self.memory_dim()))?;
        Ok((attn, x, mixed))
    }

    pub fn forward(&self, latents: &Tensor, pres: &Tensor, memory: &Tensor) -> Result<RelationalOutput> {
        let (_, x, mixed) = self.attend(latents, pres, memory)?;
        let m = self.memory_dim();
        let attended = (memory + mixed)?;
        let attended = (&attended + self.mlp.forward(&attended)?)?;
        let gates = (self.gate_input.forward(&x)? + self.gate_memory.forward(&memory.tanh()?)?)?;
        let input_gate = sigmoid(&gates.narrow(2, 0, m)?)?;
        let forget_gate = sigmoid(&(gates.narrow(2, m, m)? + 1.0)?)?;
        let next = ((input_gate * attended.tanh()?)? + (forget_gate * memory)?)?;
        let next = next.broadcast_mul(&pres.unsqueeze(2)?)?;
        Ok(RelationalOutput { gamma: Tensor::cat(&[latents, &next], 2)?, memory: Some(next) })
    }
}
