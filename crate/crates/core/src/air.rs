//! Single-frame attend-infer-repeat: the recurrent discovery core, the object
//! decoder, the additive renderer and the geometric prior over object count.

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Tensor, WithDType, D};

use crate::config::{ModelConfig, WHERE_DIM};
use crate::dist::{normal_log_prob, positive_std, reparameterize, sample_presence, PresenceMode};
use crate::error::{Error, Result};
use crate::glimpse::{composite_glimpses, extract_glimpse};
use crate::nn::{avg_pool2, sigmoid, softplus_inv, GruCell, Linear, Mlp, ParamStore};
use crate::noise::Noise;

const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_8;

/// Geometric prior `p(n) = (1 - θ)^n · θ` over the number of objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricCountPrior {
    theta: f64,
}

impl GeometricCountPrior {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::InvalidArgument(format!("geometric prior needs 0 < θ ≤ 1, got {theta}")));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn log_prob(&self, n: usize) -> f64 {
        n as f64 * self.log_continue() + self.log_stop()
    }

    /// `log(1 - θ)`, floored so that θ = 1 stays finite when multiplied by 0.
    pub fn log_continue(&self) -> f64 {
        (1.0 - self.theta).max(f64::MIN_POSITIVE).ln()
    }

    pub fn log_stop(&self) -> f64 {
        self.theta.ln()
    }

    /// Log-mass of one presence decision `z` in the sequential view of the
    /// count: each step continues with probability `1 - θ`.
    fn step_log_prob(&self, z: &Tensor) -> Result<Tensor> {
        Ok(((z * self.log_continue())? + ((1.0 - z)? * self.log_stop())?)?)
    }
}

pub fn geometric_logp(n: i64, theta: f64) -> Result<f64> {
    if n < 0 {
        return Err(Error::InvalidArgument(format!("object count must be non-negative, got {n}")));
    }
    Ok(GeometricCountPrior::new(theta)?.log_prob(n as usize))
}

/// `z_what → G×G` glimpse in [0, 1].
#[derive(Debug, Clone)]
pub struct Decoder {
    mlp: Mlp,
    size: usize,
}

impl Decoder {
    pub fn build(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mlp = ps.mlp("decoder", &[cfg.what_dim, cfg.decoder_hidden, cfg.glimpse_len()])?;
        Ok(Self { mlp, size: cfg.glimpse_size })
    }

    pub fn glimpse_size(&self) -> usize {
        self.size
    }

    /// `(.., D_what) → (.., G·G)`.
    pub fn forward(&self, what: &Tensor) -> Result<Tensor> {
        sigmoid(&self.mlp.forward(what)?)
    }

    /// Decodes one latent into a row-major `G×G` glimpse.
    pub fn decode_object(&self, what: &[f64], dtype: DType) -> Result<Vec<f64>> {
        let z = Tensor::from_slice(what, (1, what.len()), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(self.forward(&z)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Maps the unconstrained window code to `(s_x, s_y, t_x, t_y)` with
/// `s = s_min + (1 - s_min)·σ(raw_s)` and `t = raw_t`.
pub fn constrain_where(raw: &Tensor, min_scale: f64) -> Result<Tensor> {
    let last = raw.rank() - 1;
    let scale = ((sigmoid(&raw.narrow(last, 0, 2)?)? * (1.0 - min_scale))? + min_scale)?;
    Ok(Tensor::cat(&[&scale, &raw.narrow(last, 2, 2)?], last)?)
}

/// Inverse of [`constrain_where`] for a scalar scale.
pub fn unconstrain_scale(scale: f64, min_scale: f64) -> f64 {
    let p = (scale - min_scale) / (1.0 - min_scale);
    (p / (1.0 - p)).ln()
}

/// Unclamped sum `Σ_k z_pres^k · place(decode(z_what^k), z_where^k)` as
/// `(N, H, W)`; `what (N, K, D)`, `where (N, K, 4)`, `pres (N, K)`.
pub fn render_sum(
    decoder: &Decoder,
    what: &Tensor,
    r#where: &Tensor,
    pres: &Tensor,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (n, k, _) = what.dims3()?;
    if k == 0 {
        return Ok(Tensor::zeros((n, height, width), what.dtype(), what.device())?);
    }
    let g = decoder.glimpse_size();
    let glimpses = decoder.forward(what)?.reshape((n, k, g, g))?;
    composite_glimpses(&glimpses, r#where, pres, height, width)
}

/// Mean image `clamp(Σ_k z_pres^k · place(decode(z_what^k), z_where^k), 0, 1)`.
pub fn render_scene(
    decoder: &Decoder,
    what: &Tensor,
    r#where: &Tensor,
    pres: &Tensor,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    Ok(render_sum(decoder, what, r#where, pres, height, width)?.clamp(0.0, 1.0)?)
}

/// Diagonal Gaussian log-density of frames `x (N, H, W)` around `mean`,
/// summed over pixels.
pub fn gaussian_loglik(x: &Tensor, mean: &Tensor, std: f64) -> Result<Tensor> {
    let n = x.dim(0)?;
    let pixels = x.elem_count() / n.max(1);
    let sq = ((x - mean)? / std)?.sqr()?.reshape((n, pixels))?.sum(1)?;
    Ok(((sq * -0.5)? - pixels as f64 * (std.ln() + HALF_LOG_TAU))?)
}

/// `gaussian_loglik(x, clamp(canvas, 0, 1), std)` as one fused op.
///
/// Gradients pass through the clamp on the closed interval `[0, 1]`, so a
/// canvas pixel sitting exactly at 0 still learns to grow.
pub fn clamped_gaussian_loglik(x: &Tensor, canvas: &Tensor, std: f64) -> Result<Tensor> {
    if x.dims() != canvas.dims() {
        return Err(Error::Shape(format!("frames {:?} vs canvas {:?}", x.dims(), canvas.dims())));
    }
    Ok(x.contiguous()?.apply_op2(&canvas.contiguous()?, ClampedGaussian { std })?)
}

struct ClampedGaussian {
    std: f64,
}

fn rows_of(shape: &candle_core::Shape) -> (usize, usize) {
    let n = shape.dims().first().copied().unwrap_or(1);
    (n, shape.elem_count() / n.max(1))
}

fn clamped_loglik<T: WithDType>(x: &[T], c: &[T], pixels: usize, std: f64) -> Vec<T> {
    let norm = pixels as f64 * (std.ln() + HALF_LOG_TAU);
    let inv_var = 1.0 / (std * std);
    x.chunks(pixels.max(1))
        .zip(c.chunks(pixels.max(1)))
        .map(|(xr, cr)| {
            let sq: f64 = xr
                .iter()
                .zip(cr)
                .map(|(&xi, &ci)| {
                    let d = xi.to_f64() - ci.to_f64().clamp(0.0, 1.0);
                    d * d
                })
                .sum();
            T::from_f64(-0.5 * sq * inv_var - norm)
        })
        .collect()
}

fn clamped_grads<T: WithDType>(x: &[T], c: &[T], g: &[T], pixels: usize, std: f64) -> (Vec<T>, Vec<T>) {
    let inv_var = 1.0 / (std * std);
    let mut gx = Vec::with_capacity(x.len());
    let mut gc = Vec::with_capacity(x.len());
    for (i, (&xi, &ci)) in x.iter().zip(c).enumerate() {
        let ci = ci.to_f64();
        let r = (xi.to_f64() - ci.clamp(0.0, 1.0)) * inv_var * g[i / pixels].to_f64();
        gx.push(T::from_f64(-r));
        gc.push(T::from_f64(if (0.0..=1.0).contains(&ci) { r } else { 0.0 }));
    }
    (gx, gc)
}

impl CustomOp2 for ClampedGaussian {
    fn name(&self) -> &'static str {
        "clamped-gaussian-loglik"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, candle_core::Shape)> {
        let (n, pixels) = rows_of(l1.shape());
        let slice = |l: &Layout| l.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("expected contiguous input".into()));
        let ((a0, a1), (b0, b1)) = (slice(l1)?, slice(l2)?);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(c)) => CpuStorage::F32(clamped_loglik(&x[a0..a1], &c[b0..b1], pixels, self.std)),
            (CpuStorage::F64(x), CpuStorage::F64(c)) => CpuStorage::F64(clamped_loglik(&x[a0..a1], &c[b0..b1], pixels, self.std)),
            _ => candle_core::bail!("clamped gaussian supports matching f32 or f64 inputs"),
        };
        Ok((out, candle_core::Shape::from(n)))
    }

    fn bwd(
        &self,
        x: &Tensor,
        canvas: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, pixels) = rows_of(x.shape());
        macro_rules! go {
            ($t:ty) => {{
                let flat = |t: &Tensor| t.flatten_all()?.to_vec1::<$t>();
                let (gx, gc) = clamped_grads(&flat(x)?, &flat(canvas)?, &flat(grad)?, pixels, self.std);
                (Tensor::from_vec(gx, x.shape(), x.device())?, Tensor::from_vec(gc, x.shape(), x.device())?)
            }};
        }
        let (gx, gc) = match x.dtype() {
            DType::F32 => go!(f32),
            DType::F64 => go!(f64),
            dt => candle_core::bail!("clamped gaussian: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gc)))
    }
}

/// Same quantity restricted to pixels where `mask (N, H, W)` is 1.
pub fn gaussian_loglik_masked(x: &Tensor, mean: &Tensor, std: f64, mask: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let pixels = x.elem_count() / n.max(1);
    let per = ((((x - mean)? / std)?.sqr()? * -0.5)? - (std.ln() + HALF_LOG_TAU))?;
    Ok((per * mask)?.reshape((n, pixels))?.sum(1)?)
}

/// Input width of the frame encoder, which sees the residual after 2×2
/// average pooling.
pub fn pooled_len(height: usize, width: usize) -> usize {
    (height / 2) * (width / 2)
}

/// Recurrent state carried across the within-frame discovery steps.
#[derive(Debug, Clone)]
pub struct AirCoreState {
    /// `(N, H_core)`
    pub hidden: Tensor,
    /// `(N, L)` latent of the previous step.
    pub prev_latent: Tensor,
    /// `(N,)` presence of the previous step; starts at 1.
    pub prev_pres: Tensor,
    pub step_index: usize,
}

/// One discovered object per row, plus its bookkeeping.
#[derive(Debug, Clone)]
pub struct AirStep {
    pub what: Tensor,
    pub where_raw: Tensor,
    pub r#where: Tensor,
    /// `(N,)` chained presence.
    pub pres: Tensor,
    pub what_mean: Tensor,
    pub what_std: Tensor,
    pub where_mean: Tensor,
    pub where_std: Tensor,
    /// `(N,)` effective presence probability after chain termination.
    pub pres_prob: Tensor,
    /// `(N,)` posterior log-density of this step's choices.
    pub log_q: Tensor,
    /// `(N,)` discovery-prior log-density of the same choices.
    pub log_p: Tensor,
}

/// Discovery networks: a frame encoder over the unexplained residual, a
/// recurrent core and heads for presence, window and appearance, plus the
/// learned discovery prior over appearance and window.
#[derive(Debug, Clone)]
pub struct AirCore {
    frame_enc: Linear,
    core: GruCell,
    pres_head: Linear,
    where_head: Linear,
    glimpse_enc: Mlp,
    prior: Mlp,
    count: GeometricCountPrior,
    what_dim: usize,
    latent_dim: usize,
    glimpse_size: usize,
    min_scale: f64,
    std_floor: f64,
    slots: usize,
}

impl AirCore {
    pub fn build(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let l = cfg.latent_dim();
        let w = cfg.what_dim;
        let raw_scale = unconstrain_scale(cfg.init_scale, cfg.min_scale);
        let mut where_bias = vec![raw_scale, raw_scale, 0.0, 0.0];
        where_bias.extend([softplus_inv(0.1); WHERE_DIM]);
        let mut what_bias = vec![0.0; w];
        what_bias.extend(vec![softplus_inv(0.3); w]);
        let mut prior_bias = vec![0.0; w];
        prior_bias.extend(vec![softplus_inv(1.0); w]);
        prior_bias.extend([raw_scale, raw_scale, 0.0, 0.0]);
        prior_bias.extend([softplus_inv(0.5); WHERE_DIM]);
        Ok(Self {
            frame_enc: ps.linear("air.frame_enc", pooled_len(cfg.frame_height, cfg.frame_width), cfg.encoder_hidden)?,
            core: ps.gru("air.core", cfg.encoder_hidden + 2 * l, cfg.core_hidden)?,
            pres_head: ps.linear_init("air.pres", cfg.core_hidden, 1, 1.0, vec![cfg.init_pres_logit])?,
            where_head: ps.linear_init("air.where", cfg.core_hidden, 2 * WHERE_DIM, 0.5, where_bias)?,
            glimpse_enc: ps.mlp_init("air.what", &[cfg.glimpse_len(), cfg.glimpse_hidden, 2 * w], 1.0, what_bias)?,
            prior: ps.mlp_init("air.prior", &[l, cfg.prior_hidden, 2 * w + 2 * WHERE_DIM], 0.1, prior_bias)?,
            count: GeometricCountPrior::new(cfg.count_theta)?,
            what_dim: w,
            latent_dim: l,
            glimpse_size: cfg.glimpse_size,
            min_scale: cfg.min_scale,
            std_floor: cfg.std_floor,
            slots: cfg.slots,
        })
    }

    pub fn count_prior(&self) -> &GeometricCountPrior {
        &self.count
    }

    /// Fresh state at the start of a frame's discovery phase.
    pub fn initial_state(&self, rows: usize, hidden: usize, dtype: DType) -> Result<AirCoreState> {
        Ok(AirCoreState {
            hidden: Tensor::zeros((rows, hidden), dtype, &Device::Cpu)?,
            prev_latent: Tensor::zeros((rows, self.latent_dim), dtype, &Device::Cpu)?,
            prev_pres: Tensor::ones(rows, dtype, &Device::Cpu)?,
            step_index: 0,
        })
    }

    /// Infers one object per row.
    ///
    /// `canvas` is the reconstruction explained so far, `context` a
    /// permutation-invariant summary of the propagated latents and `avail`
    /// marks rows that still have a free slot. A row whose previous presence
    /// is 0 stays empty: the chain has terminated.
    #[allow(clippy::too_many_arguments)]
    pub fn infer_step(
        &self,
        frame: &Tensor,
        canvas: &Tensor,
        context: &Tensor,
        avail: &Tensor,
        state: &AirCoreState,
        noise: &mut Noise,
        mode: PresenceMode,
    ) -> Result<(AirStep, AirCoreState)> {
        if state.step_index >= self.slots {
            return Err(Error::StepOverflow { step: state.step_index, slots: self.slots });
        }
        let (n, h, w) = frame.dims3()?;
        let residual = (frame - canvas)?;
        let pooled = avg_pool2(&residual)?;
        let enc = self.frame_enc.forward(&pooled.reshape((n, pooled_len(h, w)))?)?.elu(1.0)?;
        let input = Tensor::cat(&[&enc, &state.prev_latent, context], 1)?;
        let hidden = self.core.forward(&input, &state.hidden)?;

        let pres_logit = self.pres_head.forward(&hidden)?.squeeze(1)?;
        let where_out = self.where_head.forward(&hidden)?;
        let where_mean = where_out.narrow(1, 0, WHERE_DIM)?;
        let where_std = positive_std(&where_out.narrow(1, WHERE_DIM, WHERE_DIM)?, self.std_floor)?;
        let where_raw = reparameterize(&where_mean, &where_std, noise)?;
        let r#where = constrain_where(&where_raw, self.min_scale)?;

        let glimpse = extract_glimpse(&residual, &r#where, self.glimpse_size)?;
        let what_out = self.glimpse_enc.forward(&glimpse.flatten_from(1)?)?;
        let d = self.what_dim;
        let what_mean = what_out.narrow(1, 0, d)?;
        let what_std = positive_std(&what_out.narrow(1, d, d)?, self.std_floor)?;
        let what = reparameterize(&what_mean, &what_std, noise)?;

        let decision = sample_presence(&pres_logit, noise, mode)?;
        let gate = (&state.prev_pres * avail)?;
        let pres = (&gate * &decision)?;
        let pres_prob = (sigmoid(&pres_logit)? * &gate)?;

        let cont = (normal_log_prob(&what, &what_mean, &what_std)?
            + normal_log_prob(&where_raw, &where_mean, &where_std)?)?;
        let log_q = ((&gate * crate::dist::bernoulli_log_prob(&decision, &pres_logit)?)? + (&pres * cont)?)?;

        let prior = self.prior.forward(context)?;
        let p_what_mean = prior.narrow(1, 0, d)?;
        let p_what_std = positive_std(&prior.narrow(1, d, d)?, self.std_floor)?;
        let p_where_mean = prior.narrow(1, 2 * d, WHERE_DIM)?;
        let p_where_std = positive_std(&prior.narrow(1, 2 * d + WHERE_DIM, WHERE_DIM)?, self.std_floor)?;
        let p_cont = (normal_log_prob(&what, &p_what_mean, &p_what_std)?
            + normal_log_prob(&where_raw, &p_where_mean, &p_where_std)?)?;
        let log_p = ((&gate * self.count.step_log_prob(&decision)?)? + (&pres * p_cont)?)?;

        let prev_latent = Tensor::cat(&[&what, &r#where, &pres.unsqueeze(1)?], 1)?;
        let next = AirCoreState { hidden, prev_latent, prev_pres: pres.clone(), step_index: state.step_index + 1 };
        let step = AirStep {
            what,
            where_raw,
            r#where,
            pres,
            what_mean,
            what_std,
            where_mean,
            where_std,
            pres_prob,
            log_q,
            log_p,
        };
        Ok((step, next))
    }
}

/// Sums `(N, K, ·)` latents over present slots: the discovery context.
pub fn presence_summary(latents: &Tensor, pres: &Tensor) -> Result<Tensor> {
    Ok(latents.broadcast_mul(&pres.unsqueeze(D::Minus1)?)?.sum(1)?)
}
