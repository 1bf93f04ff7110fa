//! The temporal model: propagation of existing objects, discovery of new
//! ones, learned priors for both, sequence filtering and prior rollouts.

use candle_core::{DType, Device, Tensor};

use crate::air::{
    clamped_gaussian_loglik, constrain_where, presence_summary, render_scene, render_sum, AirCore, AirStep, Decoder,
};
use crate::config::{ModelConfig, RelationalKind, WHERE_DIM};
use crate::dist::{bernoulli_log_prob, normal_log_prob, positive_std, reparameterize, sample_presence, PresenceMode};
use crate::error::{Error, Result};
use crate::glimpse::extract_glimpses;
use crate::nn::{sigmoid, softplus_inv, GruCell, Mlp, ParamStore};
use crate::noise::Noise;
use crate::relational::{RelationalModule, RelationalOutput};
use crate::scene::{gather_slots, Origin, SceneBatch, SlotParams};

/// Where the propagation context comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextRoute {
    /// `γ = Γ(z_{t-1})` through the configured relational module.
    Relational,
    /// Context is the previous latents themselves, without touching any
    /// relational code. Only valid for the identity configuration.
    Baseline,
}

/// Per-frame, per-row log-density terms.
#[derive(Debug, Clone)]
pub struct FrameTerms {
    pub log_lik: Tensor,
    pub log_p_prop: Tensor,
    pub log_q_prop: Tensor,
    pub log_p_disc: Tensor,
    pub log_q_disc: Tensor,
}

impl FrameTerms {
    /// `log p(x|z) + log p_P + log p_D - log q_P - log q_D`, shape `(N,)`.
    pub fn log_weight(&self) -> Result<Tensor> {
        let p = ((&self.log_lik + &self.log_p_prop)? + &self.log_p_disc)?;
        Ok(((p - &self.log_q_prop)? - &self.log_q_disc)?)
    }

    /// `(component name, values)` pairs for diagnostics.
    pub fn components(&self) -> Result<Vec<(&'static str, Vec<f64>)>> {
        let v = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        Ok(vec![
            ("log_lik", v(&self.log_lik)?),
            ("log_p_prop", v(&self.log_p_prop)?),
            ("log_q_prop", v(&self.log_q_prop)?),
            ("log_p_disc", v(&self.log_p_disc)?),
            ("log_q_disc", v(&self.log_q_disc)?),
        ])
    }
}

/// Output of the propagation phase, slot-aligned with the previous scene.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub what: Tensor,
    pub where_raw: Tensor,
    pub r#where: Tensor,
    pub pres: Tensor,
    pub hidden: Tensor,
    pub memory: Option<Tensor>,
    pub posterior: SlotParams,
    pub log_q: Tensor,
    pub log_p: Tensor,
}

impl Propagated {
    pub fn latents(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.what, &self.r#where, &self.pres.unsqueeze(2)?], 2)?)
    }
}

/// Output of the discovery phase: one candidate per step, stacked `(N, K, ·)`.
#[derive(Debug, Clone)]
pub struct Discovered {
    pub what: Tensor,
    pub where_raw: Tensor,
    pub r#where: Tensor,
    pub pres: Tensor,
    pub posterior: SlotParams,
    pub log_q: Tensor,
    pub log_p: Tensor,
    /// Per-step `(N,)` terms, in step order.
    pub step_log_q: Vec<Tensor>,
    pub step_log_p: Vec<Tensor>,
    /// Unclamped sum of all propagated and discovered objects.
    pub canvas: Tensor,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub scenes: Vec<SceneBatch>,
    pub terms: Vec<FrameTerms>,
    /// Rendered mean image per frame, `(N, H, W)`.
    pub means: Vec<Tensor>,
}

impl FilterOutput {
    /// `(N, T)` per-frame log-weights.
    pub fn log_weights(&self) -> Result<Tensor> {
        let cols = self.terms.iter().map(|t| t.log_weight()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&cols, 1)?)
    }

    /// `(N,)` whole-sequence log-weights.
    pub fn total(&self) -> Result<Tensor> {
        Ok(self.log_weights()?.sum(1)?)
    }
}

#[derive(Debug, Clone)]
struct Propagator {
    glimpse_enc: Mlp,
    temporal: GruCell,
    posterior: Mlp,
    prior: Mlp,
}

pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    decoder: Decoder,
    air: AirCore,
    prop: Propagator,
    relational: RelationalModule,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("cfg", &self.cfg).field("params", &self.params.total()).finish()
    }
}

/// `[Δwhat, std_what, Δwhere, std_where, pres_logit]` layout of the
/// propagation heads.
fn prop_head_bias(what: usize, what_std: f64, where_std: f64, logit: f64) -> Vec<f64> {
    let mut b = vec![0.0; what];
    b.extend(vec![softplus_inv(what_std); what]);
    b.extend([0.0; WHERE_DIM]);
    b.extend([softplus_inv(where_std); WHERE_DIM]);
    b.push(logit);
    b
}

struct HeadOut {
    what_mean: Tensor,
    what_std: Tensor,
    where_mean: Tensor,
    where_std: Tensor,
    pres_logit: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let decoder = Decoder::build(&mut ps, &cfg)?;
        let air = AirCore::build(&mut ps, &cfg)?;
        let l = cfg.latent_dim();
        let gd = cfg.gamma_dim();
        let w = cfg.what_dim;
        let head = 2 * w + 2 * WHERE_DIM + 1;
        let prop = Propagator {
            glimpse_enc: ps.mlp("prop.glimpse", &[cfg.glimpse_len(), cfg.glimpse_hidden])?,
            temporal: ps.gru("prop.temporal", cfg.glimpse_hidden + l + gd, cfg.temporal_hidden)?,
            posterior: ps.mlp_init(
                "prop.posterior",
                &[gd + cfg.temporal_hidden, cfg.head_hidden, head],
                0.1,
                prop_head_bias(w, 0.1, 0.05, 3.0),
            )?,
            prior: ps.mlp_init("prop.prior", &[gd, cfg.prior_hidden, head], 0.1, prop_head_bias(w, 0.3, 0.1, 3.0))?,
        };
        let relational = RelationalModule::build(&mut ps, &cfg)?;
        Ok(Self { cfg, params: ps, decoder, air, prop, relational })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn air(&self) -> &AirCore {
        &self.air
    }

    pub fn relational(&self) -> &RelationalModule {
        &self.relational
    }

    fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype(), &Device::Cpu)?)
    }

    /// Scene with every slot empty, used before the first frame.
    pub fn empty_scene(&self, rows: usize) -> Result<SceneBatch> {
        let k = self.cfg.slots;
        let w = self.cfg.what_dim;
        let where_raw = self.zeros(&[rows, k, WHERE_DIM])?;
        Ok(SceneBatch {
            what: self.zeros(&[rows, k, w])?,
            r#where: constrain_where(&where_raw, self.cfg.min_scale)?,
            where_raw,
            pres: self.zeros(&[rows, k])?,
            hidden: self.zeros(&[rows, k, self.cfg.temporal_hidden])?,
            memory: match self.relational.memory_dim() {
                Some(m) => Some(self.zeros(&[rows, k, m])?),
                None => None,
            },
            posterior: self.empty_params(rows)?,
            origin: vec![Origin::Empty; rows * k],
            frame_index: 0,
        })
    }

    fn empty_params(&self, rows: usize) -> Result<SlotParams> {
        let k = self.cfg.slots;
        let w = self.cfg.what_dim;
        let ones = |d: usize| -> Result<Tensor> { Ok(Tensor::ones((rows, k, d), self.dtype(), &Device::Cpu)?) };
        Ok(SlotParams {
            what_mean: self.zeros(&[rows, k, w])?,
            what_std: ones(w)?,
            where_mean: self.zeros(&[rows, k, WHERE_DIM])?,
            where_std: ones(WHERE_DIM)?,
            pres_prob: self.zeros(&[rows, k])?,
        })
    }

    /// Relational context for the next frame.
    pub fn context(&self, scene: &SceneBatch, route: ContextRoute) -> Result<RelationalOutput> {
        match route {
            ContextRoute::Relational => {
                self.relational.forward(&scene.latents()?, &scene.pres, scene.memory.as_ref())
            }
            ContextRoute::Baseline => {
                if self.relational.kind() != RelationalKind::Identity {
                    return Err(Error::InvalidArgument(
                        "the baseline route only exists for the identity configuration".into(),
                    ));
                }
                Ok(RelationalOutput { gamma: scene.latents()?, memory: None })
            }
        }
    }

    fn split_head(&self, out: &Tensor, prev_what: &Tensor, prev_raw: &Tensor) -> Result<HeadOut> {
        let w = self.cfg.what_dim;
        let floor = self.cfg.std_floor;
        Ok(HeadOut {
            what_mean: (prev_what + out.narrow(2, 0, w)?)?,
            what_std: positive_std(&out.narrow(2, w, w)?, floor)?,
            where_mean: (prev_raw + out.narrow(2, 2 * w, WHERE_DIM)?)?,
            where_std: positive_std(&out.narrow(2, 2 * w + WHERE_DIM, WHERE_DIM)?, floor)?,
            pres_logit: out.narrow(2, 2 * w + 2 * WHERE_DIM, 1)?.squeeze(2)?,
        })
    }

    fn prior_head(&self, gamma: &Tensor, prev: &SceneBatch) -> Result<HeadOut> {
        self.split_head(&self.prop.prior.forward(gamma)?, &prev.what, &prev.where_raw)
    }

    /// Propagation: every previous slot is tracked with a glimpse at its
    /// last window, a temporal recurrent update and a posterior conditioned
    /// on `(γ, h)`. An object whose presence drops to 0 stays dead.
    pub fn propagate(
        &self,
        frame: &Tensor,
        prev: &SceneBatch,
        gamma: &RelationalOutput,
        noise: &mut Noise,
        mode: PresenceMode,
    ) -> Result<Propagated> {
        let (n, _, _) = frame.dims3()?;
        let k = prev.slots();
        let g = gamma.gamma.dims();
        if g.len() != 3 || g[0] != n || g[1] != k {
            return Err(Error::Shape(format!("context {:?} does not match {n} rows of {k} slots", g)));
        }
        let size = self.cfg.glimpse_size;
        let glimpse = extract_glimpses(frame, &prev.r#where, size)?;
        let genc = self.prop.glimpse_enc.forward(&glimpse.reshape((n, k, size * size))?)?.elu(1.0)?;
        let input = Tensor::cat(&[&genc, &prev.latents()?, &gamma.gamma], 2)?;
        let hidden = self.prop.temporal.forward(&input, &prev.hidden)?;

        let q = self.split_head(
            &self.prop.posterior.forward(&Tensor::cat(&[&gamma.gamma, &hidden], 2)?)?,
            &prev.what,
            &prev.where_raw,
        )?;
        let what = reparameterize(&q.what_mean, &q.what_std, noise)?;
        let where_raw = reparameterize(&q.where_mean, &q.where_std, noise)?;
        let r#where = constrain_where(&where_raw, self.cfg.min_scale)?;
        let decision = sample_presence(&q.pres_logit, noise, mode)?;
        let pres = (&prev.pres * &decision)?;

        let q_cont = (normal_log_prob(&what, &q.what_mean, &q.what_std)?
            + normal_log_prob(&where_raw, &q.where_mean, &q.where_std)?)?;
        let log_q = ((&prev.pres * bernoulli_log_prob(&decision, &q.pres_logit)?)? + (&pres * q_cont)?)?.sum(1)?;

        let p = self.prior_head(&gamma.gamma, prev)?;
        let p_cont = (normal_log_prob(&what, &p.what_mean, &p.what_std)?
            + normal_log_prob(&where_raw, &p.where_mean, &p.where_std)?)?;
        let log_p = ((&prev.pres * bernoulli_log_prob(&decision, &p.pres_logit)?)? + (&pres * p_cont)?)?.sum(1)?;

        let posterior = SlotParams {
            what_mean: q.what_mean,
            what_std: q.what_std,
            where_mean: q.where_mean,
            where_std: q.where_std,
            pres_prob: (sigmoid(&q.pres_logit)? * &prev.pres)?,
        };
        Ok(Propagated {
            what,
            where_raw,
            r#where,
            pres,
            hidden,
            memory: gamma.memory.clone(),
            posterior,
            log_q,
            log_p,
        })
    }

    /// Propagation result for a scene with nothing to propagate.
    fn nothing_propagated(&self, prev: &SceneBatch) -> Result<Propagated> {
        let n = prev.rows();
        Ok(Propagated {
            what: prev.what.clone(),
            where_raw: prev.where_raw.clone(),
            r#where: prev.r#where.clone(),
            pres: prev.pres.clone(),
            hidden: prev.hidden.clone(),
            memory: prev.memory.clone(),
            posterior: self.empty_params(n)?,
            log_q: self.zeros(&[n])?,
            log_p: self.zeros(&[n])?,
        })
    }

    /// Discovery: up to `K - |P_t|` new objects, inferred one at a time on
    /// the residual left by everything already explained and conditioned on
    /// the sum of the propagated latents.
    pub fn discover(
        &self,
        frame: &Tensor,
        propagated: &Propagated,
        noise: &mut Noise,
        mode: PresenceMode,
    ) -> Result<Discovered> {
        let (n, h, w) = frame.dims3()?;
        let k = self.cfg.slots;
        let mut canvas = render_sum(&self.decoder, &propagated.what, &propagated.r#where, &propagated.pres, h, w)?;
        let alive: Vec<usize> = alive_mask(&propagated.pres)?.iter().map(|r| r.iter().filter(|&&a| a).count()).collect();
        let context = presence_summary(&propagated.latents()?, &propagated.pres)?;
        let mut state = self.air.initial_state(n, self.cfg.core_hidden, self.dtype())?;
        let mut steps: Vec<AirStep> = Vec::with_capacity(k);
        for j in 0..k {
            let avail: Vec<f64> = alive.iter().map(|&a| if a + j < k { 1.0 } else { 0.0 }).collect();
            let avail = Tensor::from_vec(avail, n, &Device::Cpu)?.to_dtype(self.dtype())?;
            let (step, next) = self.air.infer_step(frame, &canvas, &context, &avail, &state, noise, mode)?;
            let placed = render_sum(
                &self.decoder,
                &step.what.unsqueeze(1)?,
                &step.r#where.unsqueeze(1)?,
                &step.pres.unsqueeze(1)?,
                h,
                w,
            )?;
            canvas = (canvas + placed)?;
            steps.push(step);
            state = next;
        }
        let stack = |f: &dyn Fn(&AirStep) -> &Tensor| -> Result<Tensor> {
            if steps.is_empty() {
                return Err(Error::Shape("no discovery steps".into()));
            }
            Ok(Tensor::stack(&steps.iter().map(f).collect::<Vec<_>>(), 1)?)
        };
        if k == 0 {
            let empty = self.empty_scene(n)?;
            return Ok(Discovered {
                what: empty.what,
                where_raw: empty.where_raw,
                r#where: empty.r#where,
                pres: empty.pres,
                posterior: empty.posterior,
                log_q: self.zeros(&[n])?,
                log_p: self.zeros(&[n])?,
                step_log_q: vec![],
                step_log_p: vec![],
                canvas,
            });
        }
        let step_log_q: Vec<Tensor> = steps.iter().map(|s| s.log_q.clone()).collect();
        let step_log_p: Vec<Tensor> = steps.iter().map(|s| s.log_p.clone()).collect();
        Ok(Discovered {
            what: stack(&|s| &s.what)?,
            where_raw: stack(&|s| &s.where_raw)?,
            r#where: stack(&|s| &s.r#where)?,
            pres: stack(&|s| &s.pres)?,
            posterior: SlotParams {
                what_mean: stack(&|s| &s.what_mean)?,
                what_std: stack(&|s| &s.what_std)?,
                where_mean: stack(&|s| &s.where_mean)?,
                where_std: stack(&|s| &s.where_std)?,
                pres_prob: stack(&|s| &s.pres_prob)?,
            },
            log_q: Tensor::stack(&step_log_q, 1)?.sum(1)?,
            log_p: Tensor::stack(&step_log_p, 1)?.sum(1)?,
            step_log_q,
            step_log_p,
            canvas,
        })
    }

    /// Packs the `2K` candidates into `K` slots: live propagated objects
    /// first, then live discoveries, then empty slots.
    fn compact(&self, prop: &Propagated, disc: &Discovered, frame_index: usize) -> Result<SceneBatch> {
        let n = prop.pres.dim(0)?;
        let k = self.cfg.slots;
        let prop_alive = alive_mask(&prop.pres)?;
        let disc_alive = alive_mask(&disc.pres)?;
        let mut index = Vec::with_capacity(n * k);
        let mut origin = Vec::with_capacity(n * k);
        for row in 0..n {
            let base = (row * 2 * k) as u32;
            let mut live = Vec::with_capacity(k);
            let mut dead = Vec::with_capacity(2 * k);
            for s in 0..k {
                let entry = (base + s as u32, Origin::Propagated);
                if prop_alive[row][s] { live.push(entry) } else { dead.push(entry) }
            }
            for s in 0..k {
                let entry = (base + (k + s) as u32, Origin::Discovered);
                if disc_alive[row][s] { live.push(entry) } else { dead.push(entry) }
            }
            if live.len() > k {
                return Err(Error::Shape(format!("row {row} holds {} live objects for {k} slots", live.len())));
            }
            for (i, o) in live.iter().map(|&(i, o)| (i, o)).chain(dead.iter().map(|&(i, _)| (i, Origin::Empty))).take(k) {
                index.push(i);
                origin.push(o);
            }
        }
        let index = Tensor::from_vec(index, n * k, &Device::Cpu)?;
        let pick = |a: &Tensor, b: &Tensor| -> Result<Tensor> { gather_slots(&Tensor::cat(&[a, b], 1)?, &index, n, k) };
        let pick2 = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok(pick(&a.unsqueeze(2)?, &b.unsqueeze(2)?)?.squeeze(2)?) };
        let zeros_like = |t: &Tensor| -> Result<Tensor> { Ok(t.zeros_like()?) };
        let memory = match &prop.memory {
            Some(m) => Some(pick(m, &zeros_like(m)?)?),
            None => None,
        };
        Ok(SceneBatch {
            what: pick(&prop.what, &disc.what)?,
            where_raw: pick(&prop.where_raw, &disc.where_raw)?,
            r#where: pick(&prop.r#where, &disc.r#where)?,
            pres: pick2(&prop.pres, &disc.pres)?,
            hidden: pick(&prop.hidden, &zeros_like(&prop.hidden)?)?,
            memory,
            posterior: SlotParams {
                what_mean: pick(&prop.posterior.what_mean, &disc.posterior.what_mean)?,
                what_std: pick(&prop.posterior.what_std, &disc.posterior.what_std)?,
                where_mean: pick(&prop.posterior.where_mean, &disc.posterior.where_mean)?,
                where_std: pick(&prop.posterior.where_std, &disc.posterior.where_std)?,
                pres_prob: pick2(&prop.posterior.pres_prob, &disc.posterior.pres_prob)?,
            },
            origin,
            frame_index,
        })
    }

    /// One filtering step. `first` marks the initial frame, whose previous
    /// scene is empty and has nothing to propagate.
    pub fn step(
        &self,
        frame: &Tensor,
        prev: &SceneBatch,
        first: bool,
        route: ContextRoute,
        noise: &mut Noise,
        mode: PresenceMode,
    ) -> Result<(SceneBatch, FrameTerms, Tensor)> {
        let (_, h, w) = frame.dims3()?;
        let frame = frame.to_dtype(self.dtype())?;
        let prop = if first || self.cfg.slots == 0 {
            self.nothing_propagated(prev)?
        } else {
            let gamma = self.context(prev, route)?;
            self.propagate(&frame, prev, &gamma, noise, mode)?
        };
        let disc = self.discover(&frame, &prop, noise, mode)?;
        let log_lik = clamped_gaussian_loglik(&frame, &disc.canvas, self.cfg.obs_std)?;
        let mean = disc.canvas.clamp(0.0, 1.0)?;
        let frame_index = if first { 0 } else { prev.frame_index + 1 };
        let scene = self.compact(&prop, &disc, frame_index)?;
        let terms = FrameTerms {
            log_lik,
            log_p_prop: prop.log_p,
            log_q_prop: prop.log_q,
            log_p_disc: disc.log_p,
            log_q_disc: disc.log_q,
        };
        debug_assert_eq!(mean.dims()[1..], [h, w]);
        Ok((scene, terms, mean))
    }

    /// Single-frame inference: discovery on an empty scene. Returns the
    /// scene with its posterior and prior log-densities.
    pub fn infer_scene(&self, frame: &Tensor, noise: &mut Noise, mode: PresenceMode) -> Result<(SceneBatch, Tensor, Tensor)> {
        let empty = self.empty_scene(frame.dim(0)?)?;
        let (scene, terms, _) = self.step(frame, &empty, true, ContextRoute::Relational, noise, mode)?;
        Ok((scene, terms.log_q_disc, terms.log_p_disc))
    }

    /// Filters `frames (N, T, H, W)` front to back.
    pub fn filter_sequence(&self, frames: &Tensor, noise: &mut Noise, mode: PresenceMode) -> Result<FilterOutput> {
        self.filter_with(frames, ContextRoute::Relational, noise, mode)
    }

    /// Filtering with the context built directly from the previous latents.
    pub fn filter_sequence_baseline(
        &self,
        frames: &Tensor,
        noise: &mut Noise,
        mode: PresenceMode,
    ) -> Result<FilterOutput> {
        self.filter_with(frames, ContextRoute::Baseline, noise, mode)
    }

    pub fn filter_with(
        &self,
        frames: &Tensor,
        route: ContextRoute,
        noise: &mut Noise,
        mode: PresenceMode,
    ) -> Result<FilterOutput> {
        let (n, t, h, w) = frames.dims4()?;
        if t == 0 {
            return Err(Error::InvalidArgument("cannot filter an empty sequence".into()));
        }
        if (h, w) != (self.cfg.frame_height, self.cfg.frame_width) {
            return Err(Error::Shape(format!(
                "frames are {h}x{w}, model expects {}x{}",
                self.cfg.frame_height, self.cfg.frame_width
            )));
        }
        let mut scene = self.empty_scene(n)?;
        let mut out = FilterOutput { scenes: Vec::with_capacity(t), terms: Vec::with_capacity(t), means: Vec::with_capacity(t) };
        for i in 0..t {
            let frame = frames.narrow(1, i, 1)?.squeeze(1)?;
            let (next, terms, mean) = self.step(&frame, &scene, i == 0, route, noise, mode)?;
            out.scenes.push(next.clone());
            out.terms.push(terms);
            out.means.push(mean);
            scene = next;
        }
        Ok(out)
    }

    /// Samples `steps` future frames from the propagation prior, without
    /// discovery. Presence is drawn exactly.
    pub fn rollout_prior(&self, scene: &SceneBatch, steps: usize, noise: &mut Noise) -> Result<Vec<(SceneBatch, Tensor)>> {
        let (h, w) = (self.cfg.frame_height, self.cfg.frame_width);
        let mut current = scene.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let gamma = self.context(&current, ContextRoute::Relational)?;
            let p = self.prior_head(&gamma.gamma, &current)?;
            let what = reparameterize(&p.what_mean, &p.what_std, noise)?;
            let where_raw = reparameterize(&p.where_mean, &p.where_std, noise)?;
            let r#where = constrain_where(&where_raw, self.cfg.min_scale)?;
            let decision = sample_presence(&p.pres_logit, noise, PresenceMode::Hard)?;
            let pres = (&current.pres * decision)?;
            let origin = alive_mask(&pres)?
                .into_iter()
                .flatten()
                .map(|a| if a { Origin::Propagated } else { Origin::Empty })
                .collect();
            let posterior = SlotParams {
                pres_prob: (sigmoid(&p.pres_logit)? * &current.pres)?,
                what_mean: p.what_mean,
                what_std: p.what_std,
                where_mean: p.where_mean,
                where_std: p.where_std,
            };
            let next = SceneBatch {
                what,
                where_raw,
                r#where,
                posterior,
                pres,
                hidden: current.hidden.clone(),
                memory: gamma.memory,
                origin,
                frame_index: current.frame_index + 1,
            };
            let mean = render_scene(&self.decoder, &next.what, &next.r#where, &next.pres, h, w)?;
            out.push((next.clone(), mean));
            current = next;
        }
        Ok(out)
    }

    /// Mean image of a scene.
    pub fn render(&self, scene: &SceneBatch) -> Result<Tensor> {
        render_scene(&self.decoder, &scene.what, &scene.r#where, &scene.pres, self.cfg.frame_height, self.cfg.frame_width)
    }
}

/// Row-wise `pres > 0.5`, read back to the host.
pub(crate) fn alive_mask(pres: &Tensor) -> Result<Vec<Vec<bool>>> {
    let v = pres.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(v.into_iter().map(|r| r.into_iter().map(|p| p > 0.5).collect()).collect())
}
