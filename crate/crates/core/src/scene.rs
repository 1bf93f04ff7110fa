//! Latent-variable data model shared by inference, rendering and evaluation.
//!
//! The model itself works on batched tensors ([`SceneBatch`]); the plain
//! value types here ([`ObjectLatent`], [`SceneState`]) are per-sequence views
//! used for inspection, export and tests.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::WHERE_DIM;
use crate::error::{Error, Result};

/// One object's latent triple. Its canonical vector layout is
/// `z_what ‖ z_where ‖ z_pres` (see [`latent_concat`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub what: Vec<f64>,
    /// `(s_x, s_y, t_x, t_y)`: window scales and normalized shifts.
    pub r#where: [f64; WHERE_DIM],
    pub pres: bool,
    pub slot_id: usize,
}

impl ObjectLatent {
    pub fn zeros(what_dim: usize, slot_id: usize) -> Self {
        Self { what: vec![0.0; what_dim], r#where: [0.0; WHERE_DIM], pres: false, slot_id }
    }
}

/// Parameters emitted by an inference or prior network for one slot.
/// `where_*` describe the Gaussian over the unconstrained window code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub what_mean: Vec<f64>,
    pub what_std: Vec<f64>,
    pub where_mean: [f64; WHERE_DIM],
    pub where_std: [f64; WHERE_DIM],
    pub pres_prob: f64,
}

impl PosteriorParams {
    pub fn is_valid(&self) -> bool {
        self.what_std.iter().chain(&self.where_std).all(|&s| s > 0.0 && s.is_finite())
            && (0.0..=1.0).contains(&self.pres_prob)
            && self.what_mean.iter().chain(&self.where_mean).all(|v| v.is_finite())
    }
}

/// Whether a slot holds an object carried over from the previous frame or
/// a newly discovered one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Empty,
    Propagated,
    Discovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<ObjectLatent>,
    pub posterior: Vec<PosteriorParams>,
    pub temporal_hidden: Vec<Vec<f64>>,
    pub relational_memory: Option<Vec<Vec<f64>>>,
    /// Slots holding present objects carried over from `t - 1` (P_t).
    pub propagated_ids: Vec<usize>,
    /// Slots holding present objects discovered at `t` (D_t).
    pub discovered_ids: Vec<usize>,
    pub frame_index: usize,
}

impl SceneState {
    pub fn empty(frame_index: usize) -> Self {
        Self {
            objects: Vec::new(),
            posterior: Vec::new(),
            temporal_hidden: Vec::new(),
            relational_memory: None,
            propagated_ids: Vec::new(),
            discovered_ids: Vec::new(),
            frame_index,
        }
    }
}

/// Number of present objects, `Σ_i z_pres^i`.
pub fn present_count(state: &SceneState) -> usize {
    state.objects.iter().filter(|o| o.pres).count()
}

/// `z_what ‖ z_where ‖ z_pres` as one vector of length `D_what + 5`.
pub fn latent_concat(obj: &ObjectLatent) -> Vec<f64> {
    let mut v = Vec::with_capacity(obj.what.len() + WHERE_DIM + 1);
    v.extend_from_slice(&obj.what);
    v.extend_from_slice(&obj.r#where);
    v.push(if obj.pres { 1.0 } else { 0.0 });
    v
}

/// Inverse of [`latent_concat`].
pub fn split_latent(v: &[f64], slot_id: usize) -> Result<ObjectLatent> {
    if v.len() < WHERE_DIM + 2 {
        return Err(Error::Shape(format!("latent vector of length {} is too short", v.len())));
    }
    let what_dim = v.len() - WHERE_DIM - 1;
    let pres = match v[v.len() - 1] {
        p if p == 1.0 => true,
        p if p == 0.0 => false,
        p => return Err(Error::InvalidArgument(format!("z_pres must be 0 or 1, got {p}"))),
    };
    let mut r#where = [0.0; WHERE_DIM];
    r#where.copy_from_slice(&v[what_dim..what_dim + WHERE_DIM]);
    Ok(ObjectLatent { what: v[..what_dim].to_vec(), r#where, pres, slot_id })
}

/// A video with its per-frame collision ground truth, frames in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// `T × H × W`, row-major.
    pub frames: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// `collisions[t][b]`.
    pub collisions: Vec<Vec<bool>>,
    /// `positions[t][b]` in raw-canvas pixels.
    pub positions: Vec<Vec<[f64; 2]>>,
    pub ball_count: usize,
    pub raw_size: usize,
}

impl FrameSequence {
    pub fn from_record(header: &ballsim::DatasetHeader, rec: &ballsim::SequenceRecord) -> Self {
        let t = header.frames as usize;
        let balls = rec.balls as usize;
        let frames = rec.frames.iter().map(|&v| f32::from(v) / 255.0).collect();
        let collisions = (0..t).map(|ti| (0..balls).map(|b| rec.colliding(header, ti, b)).collect()).collect();
        let positions = (0..t)
            .map(|ti| {
                (0..balls)
                    .map(|b| {
                        let s = rec.ball_state(header, ti, b);
                        [f64::from(s[0]), f64::from(s[1])]
                    })
                    .collect()
            })
            .collect();
        Self {
            frames,
            height: header.height as usize,
            width: header.width as usize,
            collisions,
            positions,
            ball_count: balls,
            raw_size: ballsim::RAW_SIZE,
        }
    }

    pub fn len(&self) -> usize {
        self.collisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collisions.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }
}

/// Batched scene: `N` rows (sequences × particles), `K` slots each.
///
/// Slots are compacted every frame: present propagated objects first (in
/// their previous order), then present discoveries, then empty slots.
#[derive(Debug, Clone)]
pub struct SceneBatch {
    /// `(N, K, D_what)`
    pub what: Tensor,
    /// `(N, K, 4)` unconstrained window code.
    pub where_raw: Tensor,
    /// `(N, K, 4)` window `(s_x, s_y, t_x, t_y)`.
    pub r#where: Tensor,
    /// `(N, K)` presence.
    pub pres: Tensor,
    /// `(N, K, H_t)` temporal state.
    pub hidden: Tensor,
    /// `(N, K, M)` relational memory rows.
    pub memory: Option<Tensor>,
    /// Inference parameters that produced each slot.
    pub posterior: SlotParams,
    /// `N × K` slot origins.
    pub origin: Vec<Origin>,
    pub frame_index: usize,
}

/// Distribution parameters per slot, each `(N, K, ·)` except `pres_prob (N, K)`.
#[derive(Debug, Clone)]
pub struct SlotParams {
    pub what_mean: Tensor,
    pub what_std: Tensor,
    pub where_mean: Tensor,
    pub where_std: Tensor,
    pub pres_prob: Tensor,
}

impl SlotParams {
    pub fn index_rows(&self, flat_index: &Tensor, n: usize, k: usize) -> Result<Self> {
        Ok(Self {
            what_mean: gather_slots(&self.what_mean, flat_index, n, k)?,
            what_std: gather_slots(&self.what_std, flat_index, n, k)?,
            where_mean: gather_slots(&self.where_mean, flat_index, n, k)?,
            where_std: gather_slots(&self.where_std, flat_index, n, k)?,
            pres_prob: gather_slots(&self.pres_prob.unsqueeze(2)?, flat_index, n, k)?.squeeze(2)?,
        })
    }
}

/// Selects rows of `t (N, S, ·)` by flat indices into the `(N·S)` rows,
/// producing `(N, K, ·)`.
pub(crate) fn gather_slots(t: &Tensor, flat_index: &Tensor, n: usize, k: usize) -> Result<Tensor> {
    let dims = t.dims();
    let width = dims[2];
    let flat = t.reshape((dims[0] * dims[1], width))?;
    Ok(flat.index_select(flat_index, 0)?.reshape((n, k, width))?)
}

impl SceneBatch {
    pub fn rows(&self) -> usize {
        self.pres.dims()[0]
    }

    pub fn slots(&self) -> usize {
        self.pres.dims()[1]
    }

    /// `(N, K, D_what + 5)` canonical latents `z_what ‖ z_where ‖ z_pres`.
    pub fn latents(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.what, &self.r#where, &self.pres.unsqueeze(2)?], 2)?)
    }

    /// Hard presence as 0/1 floats read back from the tensor.
    pub fn pres_values(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.pres.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn present_counts(&self) -> Result<Vec<usize>> {
        Ok(self.pres_values()?.iter().map(|r| r.iter().filter(|&&p| p > 0.5).count()).collect())
    }

    /// Per-row value view.
    pub fn to_scene_states(&self) -> Result<Vec<SceneState>> {
        let f64v3 = |t: &Tensor| -> Result<Vec<Vec<Vec<f64>>>> { Ok(t.to_dtype(DType::F64)?.to_vec3::<f64>()?) };
        let what = f64v3(&self.what)?;
        let wh = f64v3(&self.r#where)?;
        let hidden = f64v3(&self.hidden)?;
        let memory = self.memory.as_ref().map(f64v3).transpose()?;
        let pres = self.pres_values()?;
        let wm = f64v3(&self.posterior.what_mean)?;
        let ws = f64v3(&self.posterior.what_std)?;
        let rm = f64v3(&self.posterior.where_mean)?;
        let rs = f64v3(&self.posterior.where_std)?;
        let pp = self.posterior.pres_prob.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let k = self.slots();
        let arr4 = |v: &[f64]| -> [f64; WHERE_DIM] { [v[0], v[1], v[2], v[3]] };
        Ok((0..self.rows())
            .map(|n| {
                let objects = (0..k)
                    .map(|s| ObjectLatent {
                        what: what[n][s].clone(),
                        r#where: arr4(&wh[n][s]),
                        pres: pres[n][s] > 0.5,
                        slot_id: s,
                    })
                    .collect();
                let posterior = (0..k)
                    .map(|s| PosteriorParams {
                        what_mean: wm[n][s].clone(),
                        what_std: ws[n][s].clone(),
                        where_mean: arr4(&rm[n][s]),
                        where_std: arr4(&rs[n][s]),
                        pres_prob: pp[n][s],
                    })
                    .collect();
                let origin = &self.origin[n * k..(n + 1) * k];
                let ids = |o: Origin| {
                    (0..k).filter(|&s| origin[s] == o && pres[n][s] > 0.5).collect::<Vec<_>>()
                };
                SceneState {
                    objects,
                    posterior,
                    temporal_hidden: hidden[n].clone(),
                    relational_memory: memory.as_ref().map(|m| m[n].clone()),
                    propagated_ids: ids(Origin::Propagated),
                    discovered_ids: ids(Origin::Discovered),
                    frame_index: self.frame_index,
                }
            })
            .collect())
    }
}

/// Stacks the first `len` frames of each sequence into `(B, len, H, W)`.
pub fn stack_frames(seqs: &[&FrameSequence], len: usize, dtype: DType) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(seqs.len() * len * h * w);
    for s in seqs {
        if (s.height, s.width) != (h, w) || s.len() < len {
            return Err(Error::Shape(format!(
                "sequence of {} {}x{} frames cannot supply {len} {h}x{w} frames",
                s.len(),
                s.height,
                s.width
            )));
        }
        data.extend_from_slice(&s.frames[..len * h * w]);
    }
    Ok(Tensor::from_vec(data, (seqs.len(), len, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(pres: bool, slot: usize) -> ObjectLatent {
        ObjectLatent { what: vec![0.1 * slot as f64; 5], r#where: [0.3, 0.3, 0.0, 0.1], pres, slot_id: slot }
    }

    #[test]
    fn count_examples() {
        assert_eq!(present_count(&SceneState::empty(0)), 0);
        let mut s = SceneState::empty(0);
        s.objects = vec![obj(true, 0), obj(true, 1), obj(false, 2), obj(true, 3)];
        assert_eq!(present_count(&s), 3);
        s.objects.reverse();
        assert_eq!(present_count(&s), 3);
    }

    #[test]
    fn concat_layout() {
        assert_eq!(latent_concat(&ObjectLatent::zeros(5, 0)), vec![0.0; 10]);
        let o = ObjectLatent {
            what: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            r#where: [1.0, 1.0, 0.0, 0.0],
            pres: true,
            slot_id: 0,
        };
        assert_eq!(latent_concat(&o), vec![1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn split_rejects_non_binary_presence() {
        let mut v = latent_concat(&obj(true, 0));
        *v.last_mut().unwrap() = 0.4;
        assert!(split_latent(&v, 0).is_err());
        assert!(split_latent(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn posterior_validity() {
        let p = PosteriorParams {
            what_mean: vec![0.0],
            what_std: vec![0.1],
            where_mean: [0.0; 4],
            where_std: [1.0; 4],
            pres_prob: 0.5,
        };
        assert!(p.is_valid());
        assert!(!PosteriorParams { pres_prob: 1.5, ..p.clone() }.is_valid());
        assert!(!PosteriorParams { what_std: vec![0.0], ..p }.is_valid());
    }
}
