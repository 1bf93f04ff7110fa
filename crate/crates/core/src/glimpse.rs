//! Differentiable attention windows.
//!
//! A window `z_where = (s_x, s_y, t_x, t_y)` maps glimpse coordinates
//! `u ∈ [-1, 1]²` to frame coordinates `x = s ⊙ u + t`, both normalized so the
//! frame spans `[-1, 1]²` (pixel centres at `(2j + 1)/W - 1`). Extraction
//! samples the frame through this map; placement samples the glimpse through
//! the inverse map. Sampling is bilinear with zero padding outside the source.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::config::WHERE_DIM;
use crate::error::{Error, Result};

/// `[[s_x, 0, t_x], [0, s_y, t_y]]` in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineWindow {
    pub matrix: [[f64; 3]; 2],
}

impl AffineWindow {
    pub fn identity() -> Self {
        Self { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn scale(&self) -> [f64; 2] {
        [self.matrix[0][0], self.matrix[1][1]]
    }

    pub fn shift(&self) -> [f64; 2] {
        [self.matrix[0][2], self.matrix[1][2]]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    /// Closed-form inverse of the scale-shift map.
    pub fn inverse(&self) -> Result<Self> {
        let [sx, sy] = self.scale();
        if !(sx > 0.0 && sy > 0.0) {
            return Err(Error::InvalidWindow { sx, sy });
        }
        let [tx, ty] = self.shift();
        Ok(Self { matrix: [[1.0 / sx, 0.0, -tx / sx], [0.0, 1.0 / sy, -ty / sy]] })
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Self { matrix: m }
    }

    /// Window corners in pixel units of a `height × width` frame (edges, not
    /// pixel centres), ordered top-left, top-right, bottom-right, bottom-left.
    pub fn pixel_corners(&self, height: usize, width: usize) -> [[f64; 2]; 4] {
        let to_px = |p: [f64; 2]| [(p[0] + 1.0) * width as f64 / 2.0, (p[1] + 1.0) * height as f64 / 2.0];
        [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]].map(|u| to_px(self.apply(u)))
    }
}

pub fn where_to_affine(z_where: &[f64; WHERE_DIM]) -> Result<AffineWindow> {
    let [sx, sy, tx, ty] = *z_where;
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::InvalidWindow { sx, sy });
    }
    Ok(AffineWindow { matrix: [[sx, 0.0, tx], [0.0, sy, ty]] })
}

/// Normalized centre coordinate of pixel `i` in a grid of `n`.
#[inline]
fn centre(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Output index range whose samples can touch the source at all.
fn live_range(a: f64, b: f64, n_src: usize, n_out: usize) -> (usize, usize) {
    if !(a > 0.0) || !a.is_finite() || !b.is_finite() {
        return (0, n_out);
    }
    let out_index = |p_src: f64| {
        let x = (2.0 * p_src + 1.0) / n_src as f64 - 1.0;
        let u = (x - b) / a;
        ((u + 1.0) * n_out as f64 - 1.0) / 2.0
    };
    let lo = (out_index(-1.0).floor() - 1.0).max(0.0);
    let hi = (out_index(n_src as f64).ceil() + 2.0).max(0.0);
    let lo = (lo as usize).min(n_out);
    let hi = (hi.min(n_out as f64) as usize).max(lo);
    (lo, hi)
}

/// Source and output grid sizes of one resampling.
#[derive(Debug, Clone, Copy)]
struct Grid {
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
}

/// Bilinear taps for one output pixel: top-left index and fractions.
#[inline]
fn source_point(a: f64, b: f64, c: f64, n_src: usize) -> (isize, f64) {
    let p = ((a * c + b + 1.0) * n_src as f64 - 1.0) / 2.0;
    let f = p.floor();
    (f as isize, p - f)
}

/// One bilinear axis: the lower tap index, its fraction and whether each
/// of the two taps lies inside the source.
#[derive(Clone, Copy)]
struct Tap {
    index: usize,
    frac: f64,
    lo: bool,
    hi: bool,
}

#[inline]
fn tap(a: f64, b: f64, c: f64, n_src: usize) -> Tap {
    let (i, frac) = source_point(a, b, c, n_src);
    let n = n_src as isize;
    Tap { index: i.max(0) as usize, frac, lo: i >= 0 && i < n, hi: i + 1 >= 0 && i + 1 < n }
}

impl Tap {
    /// Index of the upper tap; only meaningful when `hi` holds.
    #[inline]
    fn upper(&self) -> usize {
        if self.lo {
            self.index + 1
        } else {
            0
        }
    }
}

/// Bilinear value at the taps `(ty, tx)`, zero outside the source.
#[inline]
fn bilinear<T: WithDType>(src: &[T], w: usize, ty: &Tap, tx: &Tap) -> [f64; 4] {
    let at = |y: usize, x: usize| src[y * w + x].to_f64();
    let f00 = if ty.lo && tx.lo { at(ty.index, tx.index) } else { 0.0 };
    let f01 = if ty.lo && tx.hi { at(ty.index, tx.upper()) } else { 0.0 };
    let f10 = if ty.hi && tx.lo { at(ty.upper(), tx.index) } else { 0.0 };
    let f11 = if ty.hi && tx.hi { at(ty.upper(), tx.upper()) } else { 0.0 };
    [f00, f01, f10, f11]
}

fn column_taps(ax: f64, bx: f64, g: &Grid) -> (usize, Vec<Tap>) {
    let (j0, j1) = live_range(ax, bx, g.src_w, g.out_w);
    (j0, (j0..j1).map(|j| tap(ax, bx, centre(j, g.out_w), g.src_w)).collect())
}

/// `out += weight · resample(src)` for one image, with `p = (a_x, a_y, b_x, b_y)`.
fn sample_into<T: WithDType>(src: &[T], p: [f64; 4], g: &Grid, weight: f64, out: &mut [T]) {
    let [ax, ay, bx, by] = p;
    let (i0, i1) = live_range(ay, by, g.src_h, g.out_h);
    let (j0, cols) = column_taps(ax, bx, g);
    for i in i0..i1 {
        let ty = tap(ay, by, centre(i, g.out_h), g.src_h);
        if !ty.lo && !ty.hi {
            continue;
        }
        let row = &mut out[i * g.out_w + j0..i * g.out_w + j0 + cols.len()];
        for (o, tx) in row.iter_mut().zip(&cols) {
            let [f00, f01, f10, f11] = bilinear(src, g.src_w, &ty, tx);
            let (fy, fx) = (ty.frac, tx.frac);
            let v = (1.0 - fy) * ((1.0 - fx) * f00 + fx * f01) + fy * ((1.0 - fx) * f10 + fx * f11);
            if v != 0.0 {
                *o = T::from_f64(o.to_f64() + weight * v);
            }
        }
    }
}

/// Backward of [`sample_into`]: accumulates `weight · ∂/∂src` into
/// `grad_src` and returns `(weight · ∂/∂p, Σ go · resample(src))`.
fn sample_grad<T: WithDType>(
    src: &[T],
    p: [f64; 4],
    g: &Grid,
    weight: f64,
    go: &[T],
    grad_src: &mut [T],
) -> ([f64; 4], f64) {
    let [ax, ay, bx, by] = p;
    let (hf, wf) = (g.src_h as f64, g.src_w as f64);
    let mut acc = [0.0f64; 4];
    let mut dot = 0.0;
    let (i0, i1) = live_range(ay, by, g.src_h, g.out_h);
    let (j0, cols) = column_taps(ax, bx, g);
    for i in i0..i1 {
        let v = centre(i, g.out_h);
        let ty = tap(ay, by, v, g.src_h);
        if !ty.lo && !ty.hi {
            continue;
        }
        let fy = ty.frac;
        for (c, tx) in cols.iter().enumerate() {
            let j = j0 + c;
            let gval = go[i * g.out_w + j].to_f64();
            if gval == 0.0 {
                continue;
            }
            let u = centre(j, g.out_w);
            let fx = tx.frac;
            let [f00, f01, f10, f11] = bilinear(src, g.src_w, &ty, tx);
            let gw = gval * weight;
            let mut add = |ok: bool, y: usize, x: usize, t: f64| {
                if ok {
                    let s = &mut grad_src[y * g.src_w + x];
                    *s = T::from_f64(s.to_f64() + gw * t);
                }
            };
            add(ty.lo && tx.lo, ty.index, tx.index, (1.0 - fy) * (1.0 - fx));
            add(ty.lo && tx.hi, ty.index, tx.upper(), (1.0 - fy) * fx);
            add(ty.hi && tx.lo, ty.upper(), tx.index, fy * (1.0 - fx));
            add(ty.hi && tx.hi, ty.upper(), tx.upper(), fy * fx);
            dot += gval * ((1.0 - fy) * ((1.0 - fx) * f00 + fx * f01) + fy * ((1.0 - fx) * f10 + fx * f11));
            let d_px = (1.0 - fy) * (f01 - f00) + fy * (f11 - f10);
            let d_py = (1.0 - fx) * (f10 - f00) + fx * (f11 - f01);
            acc[0] += gw * d_px * wf / 2.0 * u;
            acc[1] += gw * d_py * hf / 2.0 * v;
            acc[2] += gw * d_px * wf / 2.0;
            acc[3] += gw * d_py * hf / 2.0;
        }
    }
    (acc, dot)
}

fn params_at<T: WithDType>(params: &[T], i: usize) -> [f64; 4] {
    let p = &params[i * 4..i * 4 + 4];
    [p[0].to_f64(), p[1].to_f64(), p[2].to_f64(), p[3].to_f64()]
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("affine resampling expects contiguous inputs"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Which images are read and written by a batched resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout3 {
    /// Image `i` of the source to image `i` of the output.
    OneToOne,
    /// Frame `n` to windows `(n, k)`: `K` reads per source image.
    Fanout(usize),
    /// Windows `(n, k)` summed into output `n`, weighted by a presence.
    Composite(usize),
}

/// Forward over all images. `images` is the number of (source, params)
/// pairs; `weights` is only used for compositing.
fn run_forward<T: WithDType>(
    src: &[T],
    params: &[T],
    weights: Option<&[T]>,
    grid: &Grid,
    kind: Layout3,
    images: usize,
) -> Vec<T> {
    let src_plane = grid.src_h * grid.src_w;
    let out_plane = grid.out_h * grid.out_w;
    let outputs = match kind {
        Layout3::Composite(k) => images / k,
        _ => images,
    };
    let mut out = vec![T::from_f64(0.0); outputs * out_plane];
    for i in 0..images {
        let (s_idx, o_idx, w) = match kind {
            Layout3::OneToOne => (i, i, 1.0),
            Layout3::Fanout(k) => (i / k, i, 1.0),
            Layout3::Composite(k) => (i, i / k, weights.map_or(1.0, |w| w[i].to_f64())),
        };
        if w == 0.0 {
            continue;
        }
        sample_into(
            &src[s_idx * src_plane..(s_idx + 1) * src_plane],
            params_at(params, i),
            grid,
            w,
            &mut out[o_idx * out_plane..(o_idx + 1) * out_plane],
        );
    }
    out
}

/// Backward over all images: `(grad_src, grad_params, grad_weights)`.
fn run_backward<T: WithDType>(
    src: &[T],
    params: &[T],
    weights: Option<&[T]>,
    grad: &[T],
    grid: &Grid,
    kind: Layout3,
    images: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let src_plane = grid.src_h * grid.src_w;
    let out_plane = grid.out_h * grid.out_w;
    let sources = match kind {
        Layout3::Fanout(k) => images / k,
        _ => images,
    };
    let mut grad_src = vec![T::from_f64(0.0); sources * src_plane];
    let mut grad_params = vec![T::from_f64(0.0); images * 4];
    let mut grad_weights = vec![T::from_f64(0.0); images];
    for i in 0..images {
        let (s_idx, o_idx, w) = match kind {
            Layout3::OneToOne => (i, i, 1.0),
            Layout3::Fanout(k) => (i / k, i, 1.0),
            Layout3::Composite(k) => (i, i / k, weights.map_or(1.0, |w| w[i].to_f64())),
        };
        let (gp, dot) = sample_grad(
            &src[s_idx * src_plane..(s_idx + 1) * src_plane],
            params_at(params, i),
            grid,
            w,
            &grad[o_idx * out_plane..(o_idx + 1) * out_plane],
            &mut grad_src[s_idx * src_plane..(s_idx + 1) * src_plane],
        );
        for (d, v) in grad_params[i * 4..i * 4 + 4].iter_mut().zip(gp) {
            *d = T::from_f64(v);
        }
        grad_weights[i] = T::from_f64(dot);
    }
    (grad_src, grad_params, grad_weights)
}

/// Batched bilinear resampling. For an output pixel with normalized
/// coordinates `(u, v)` the source is read at `(a_x·u + b_x, a_y·v + b_y)`,
/// with per-image params `(a_x, a_y, b_x, b_y)`.
#[derive(Debug, Clone, Copy)]
struct Resample {
    out_h: usize,
    out_w: usize,
    kind: Layout3,
}

impl Resample {
    /// Source dims, number of images and output shape.
    fn plan(&self, src: &Shape, params: &Shape) -> candle_core::Result<(Grid, usize, Shape)> {
        let sd = src.dims();
        let pd = params.dims();
        let bad = || candle_core::Error::Msg(format!("resample: params {pd:?} do not match source {sd:?}"));
        let (grid, images, out) = match self.kind {
            Layout3::OneToOne => {
                let (n, h, w) = src.dims3()?;
                if pd != [n, 4] {
                    return Err(bad());
                }
                (Grid { src_h: h, src_w: w, out_h: self.out_h, out_w: self.out_w }, n, Shape::from((n, self.out_h, self.out_w)))
            }
            Layout3::Fanout(k) => {
                let (n, h, w) = src.dims3()?;
                if pd != [n, k, 4] {
                    return Err(bad());
                }
                let grid = Grid { src_h: h, src_w: w, out_h: self.out_h, out_w: self.out_w };
                (grid, n * k, Shape::from((n, k, self.out_h, self.out_w)))
            }
            Layout3::Composite(k) => {
                let (n, kk, h, w) = src.dims4()?;
                if kk != k || pd != [n, k, 4] {
                    return Err(bad());
                }
                let grid = Grid { src_h: h, src_w: w, out_h: self.out_h, out_w: self.out_w };
                (grid, n * k, Shape::from((n, self.out_h, self.out_w)))
            }
        };
        Ok((grid, images, out))
    }

    fn forward_storage(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: Option<(&CpuStorage, &Layout)>,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (grid, images, shape) = self.plan(l1.shape(), l2.shape())?;
        macro_rules! go {
            ($a:expr, $b:expr, $w:expr, $variant:ident) => {{
                let src = contiguous($a, l1)?;
                let params = contiguous($b, l2)?;
                CpuStorage::$variant(run_forward(src, params, $w, &grid, self.kind, images))
            }};
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), None) => go!(a, b, None, F32),
            (CpuStorage::F64(a), CpuStorage::F64(b), None) => go!(a, b, None, F64),
            (CpuStorage::F32(a), CpuStorage::F32(b), Some((CpuStorage::F32(c), l3))) => {
                go!(a, b, Some(contiguous(c, l3)?), F32)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), Some((CpuStorage::F64(c), l3))) => {
                go!(a, b, Some(contiguous(c, l3)?), F64)
            }
            _ => candle_core::bail!("resample supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn backward_tensors(
        &self,
        src: &Tensor,
        params: &Tensor,
        weights: Option<&Tensor>,
        grad: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (grid, images, _) = self.plan(src.shape(), params.shape())?;
        let dev = src.device();
        macro_rules! go {
            ($t:ty) => {{
                let s = host::<$t>(src)?;
                let p = host::<$t>(params)?;
                let w = weights.map(host::<$t>).transpose()?;
                let g = host::<$t>(grad)?;
                let (gs, gp, gw) = run_backward(&s, &p, w.as_deref(), &g, &grid, self.kind, images);
                (
                    Tensor::from_vec(gs, src.shape(), dev)?,
                    Tensor::from_vec(gp, params.shape(), dev)?,
                    Tensor::from_vec(gw, images, dev)?,
                )
            }};
        }
        Ok(match src.dtype() {
            candle_core::DType::F32 => go!(f32),
            candle_core::DType::F64 => go!(f64),
            dt => candle_core::bail!("resample: unsupported dtype {dt:?}"),
        })
    }
}

impl CustomOp2 for Resample {
    fn name(&self) -> &'static str {
        "affine-resample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        self.forward_storage(s1, l1, s2, l2, None)
    }

    fn bwd(
        &self,
        src: &Tensor,
        params: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gs, gp, _) = self.backward_tensors(src, params, None, grad)?;
        Ok((Some(gs), Some(gp)))
    }
}

impl CustomOp3 for Resample {
    fn name(&self) -> &'static str {
        "affine-composite"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        self.forward_storage(s1, l1, s2, l2, Some((s3, l3)))
    }

    fn bwd(
        &self,
        src: &Tensor,
        params: &Tensor,
        weights: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gs, gp, gw) = self.backward_tensors(src, params, Some(weights), grad)?;
        Ok((Some(gs), Some(gp), Some(gw.reshape(weights.shape())?)))
    }
}

fn resample(src: &Tensor, params: &Tensor, op: Resample) -> Result<Tensor> {
    Ok(src.contiguous()?.apply_op2(&params.contiguous()?, op)?)
}

/// Inverse window params `(1/s, -t/s)` for placement.
fn inverse_params(z_where: &Tensor) -> Result<Tensor> {
    let last = z_where.rank() - 1;
    let inv_scale = z_where.narrow(last, 0, 2)?.recip()?;
    let inv_shift = (z_where.narrow(last, 2, 2)?.neg()? * &inv_scale)?;
    Ok(Tensor::cat(&[inv_scale, inv_shift], last)?)
}

fn check_scales(z_where: &Tensor) -> Result<()> {
    let last = z_where.rank() - 1;
    let min = z_where.narrow(last, 0, 2)?.flatten_all()?.min(0)?.to_dtype(candle_core::DType::F64)?;
    let min = min.to_scalar::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::InvalidWindow { sx: min, sy: min });
    }
    Ok(())
}

/// Bilinear `size × size` glimpses of `frames (N, H, W)` through the windows
/// `z_where (N, 4)`. Differentiable in both arguments.
pub fn extract_glimpse(frames: &Tensor, z_where: &Tensor, size: usize) -> Result<Tensor> {
    resample(frames, z_where, Resample { out_h: size, out_w: size, kind: Layout3::OneToOne })
}

/// `K` glimpses per frame: `frames (N, H, W)`, `z_where (N, K, 4)` →
/// `(N, K, size, size)`, without materializing `K` copies of each frame.
pub fn extract_glimpses(frames: &Tensor, z_where: &Tensor, size: usize) -> Result<Tensor> {
    let k = z_where.dim(1)?;
    resample(frames, z_where, Resample { out_h: size, out_w: size, kind: Layout3::Fanout(k) })
}

/// Warps `glimpses (N, G, G)` into zero canvases of `height × width` through
/// the inverse of each window.
pub fn place_glimpse(glimpses: &Tensor, z_where: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    check_scales(z_where)?;
    place_glimpse_unchecked(glimpses, z_where, height, width)
}

/// [`place_glimpse`] without the scale check, for windows that are positive
/// by construction.
pub(crate) fn place_glimpse_unchecked(
    glimpses: &Tensor,
    z_where: &Tensor,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    resample(glimpses, &inverse_params(z_where)?, Resample { out_h: height, out_w: width, kind: Layout3::OneToOne })
}

/// `Σ_k weights[n, k] · place(glimpses[n, k], z_where[n, k])`: glimpses
/// `(N, K, G, G)`, windows `(N, K, 4)` with positive scales, weights `(N, K)`.
/// Only the pixels each window covers are visited.
pub fn composite_glimpses(
    glimpses: &Tensor,
    z_where: &Tensor,
    weights: &Tensor,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let k = z_where.dim(1)?;
    let op = Resample { out_h: height, out_w: width, kind: Layout3::Composite(k) };
    Ok(glimpses.contiguous()?.apply_op3(&inverse_params(z_where)?.contiguous()?, &weights.contiguous()?, op)?)
}
