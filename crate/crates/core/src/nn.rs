//! Parameter storage and the handful of layers the model is built from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Tensor, Var, WithDType, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors, kept in name order so that iteration (and
/// therefore optimizer arithmetic) is deterministic.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// `fan_in × fan_out` weight drawn uniformly from ±gain/√fan_in.
    pub fn uniform(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Tensor> {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.register(name, values, &[fan_in, fan_out])
    }

    pub fn constant(&mut self, name: &str, values: Vec<f64>) -> Result<Tensor> {
        let n = values.len();
        self.register(name, values, &[n])
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.linear_init(name, fan_in, fan_out, 1.0, vec![0.0; fan_out])
    }

    pub fn linear_init(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: Vec<f64>,
    ) -> Result<Linear> {
        if bias.len() != fan_out {
            return Err(Error::Shape(format!("{name}: bias has {} entries, want {fan_out}", bias.len())));
        }
        let weight = self.uniform(&format!("{name}.weight"), fan_in, fan_out, gain)?;
        let bias = self.constant(&format!("{name}.bias"), bias)?;
        Ok(Linear { weight, bias: Some(bias) })
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let weight = self.uniform(&format!("{name}.weight"), fan_in, fan_out, 1.0)?;
        Ok(Linear { weight, bias: None })
    }

    pub fn mlp(&mut self, name: &str, widths: &[usize]) -> Result<Mlp> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    /// Like [`ParamStore::mlp`] but with a scaled, biased output layer, so a
    /// head can start near a chosen operating point.
    pub fn mlp_init(&mut self, name: &str, widths: &[usize], out_gain: f64, out_bias: Vec<f64>) -> Result<Mlp> {
        let last = widths.len() - 1;
        let mut layers = Vec::with_capacity(last);
        for i in 0..last {
            let layer_name = format!("{name}.{i}");
            layers.push(if i + 1 == last {
                self.linear_init(&layer_name, widths[i], widths[i + 1], out_gain, out_bias.clone())?
            } else {
                self.linear(&layer_name, widths[i], widths[i + 1])?
            });
        }
        Ok(Mlp { layers })
    }

    pub fn gru(&mut self, name: &str, input: usize, hidden: usize) -> Result<GruCell> {
        Ok(GruCell {
            input: self.linear(&format!("{name}.input"), input, 3 * hidden)?,
            recurrent: self.linear(&format!("{name}.recurrent"), hidden, 3 * hidden)?,
            hidden,
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count("")
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_map(), path)?;
        Ok(())
    }

    /// Overwrites every parameter from `map`; names and shapes must match exactly.
    pub fn assign(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        if map.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                map.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&map)
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Applies to the last dimension of `x`; any leading dimensions are kept.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (lead, last) = dims.split_at(dims.len() - 1);
        let rows: usize = lead.iter().product();
        let flat = x.reshape((rows, last[0]))?;
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.apply_op2(b, BiasAdd)?;
        }
        let mut out_dims = lead.to_vec();
        out_dims.push(self.weight.dim(1)?);
        Ok(y.reshape(out_dims)?)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Feed-forward stack with ELU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.elu(1.0)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gx = self.input.forward(x)?;
        let gh = self.recurrent.forward(h)?;
        let n = self.hidden;
        let last = gx.rank() - 1;
        let update = sigmoid(&(gx.narrow(last, 0, n)? + gh.narrow(last, 0, n)?)?)?;
        let reset = sigmoid(&(gx.narrow(last, n, n)? + gh.narrow(last, n, n)?)?)?;
        let cand = (gx.narrow(last, 2 * n, n)? + (reset * gh.narrow(last, 2 * n, n)?)?)?.tanh()?;
        // h' = (1 - u)·cand + u·h
        Ok((&cand + (update * (h - &cand)?)?)?)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Inverse of [`softplus`] for a positive scalar.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))`, computed without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `log σ(x)`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// `y + b` for `y (rows, out)` and `b (out,)`. The bias gradient is a
/// contiguous row sum rather than a strided reduction.
struct BiasAdd;

fn add_rows<T: WithDType>(y: &[T], b: &[T]) -> Vec<T> {
    let mut out = y.to_vec();
    for row in out.chunks_mut(b.len()) {
        for (v, &bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
    out
}

fn sum_rows<T: WithDType>(g: &[T], width: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); width];
    for row in g.chunks(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, candle_core::Shape)> {
        let (_, out) = l1.shape().dims2()?;
        if l2.shape().dims() != [out] {
            candle_core::bail!("bias {:?} does not match width {out}", l2.shape());
        }
        let (Some((a0, a1)), Some((b0, b1))) = (l1.contiguous_offsets(), l2.contiguous_offsets()) else {
            candle_core::bail!("bias-add expects contiguous inputs")
        };
        let res = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(b)) => CpuStorage::F32(add_rows(&y[a0..a1], &b[b0..b1])),
            (CpuStorage::F64(y), CpuStorage::F64(b)) => CpuStorage::F64(add_rows(&y[a0..a1], &b[b0..b1])),
            _ => candle_core::bail!("bias-add supports matching f32 or f64 inputs"),
        };
        Ok((res, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _y: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let width = b.dim(0)?;
        let grad = grad.contiguous()?;
        let gb = match grad.dtype() {
            DType::F32 => Tensor::from_vec(sum_rows(&grad.flatten_all()?.to_vec1::<f32>()?, width), width, b.device())?,
            DType::F64 => Tensor::from_vec(sum_rows(&grad.flatten_all()?.to_vec1::<f64>()?, width), width, b.device())?,
            dt => candle_core::bail!("bias-add: unsupported dtype {dt:?}"),
        };
        Ok((Some(grad), Some(gb)))
    }
}

/// 2×2 average pooling of `(N, H, W)` images to `(N, H/2, W/2)`; a trailing
/// odd row or column is dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    x.dims3()?;
    Ok(x.contiguous()?.apply_op1(AvgPool2)?)
}

struct AvgPool2;

fn pool_dims(shape: &candle_core::Shape) -> candle_core::Result<(usize, usize, usize)> {
    shape.dims3()
}

fn pool_fwd<T: WithDType>(x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * ph * pw);
    for img in x.chunks(h * w).take(n) {
        for i in 0..ph {
            let (r0, r1) = (&img[2 * i * w..(2 * i + 1) * w], &img[(2 * i + 1) * w..(2 * i + 2) * w]);
            for j in 0..pw {
                let sum = r0[2 * j].to_f64() + r0[2 * j + 1].to_f64() + r1[2 * j].to_f64() + r1[2 * j + 1].to_f64();
                out.push(T::from_f64(0.25 * sum));
            }
        }
    }
    out
}

fn pool_bwd<T: WithDType>(g: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * h * w];
    for (img, gi) in out.chunks_mut(h * w).zip(g.chunks(ph * pw)) {
        for i in 0..ph {
            for j in 0..pw {
                let v = T::from_f64(0.25 * gi[i * pw + j].to_f64());
                for r in [2 * i, 2 * i + 1] {
                    img[r * w + 2 * j] = v;
                    img[r * w + 2 * j + 1] = v;
                }
            }
        }
    }
    out
}

impl CustomOp1 for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg-pool-2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, candle_core::Shape)> {
        let (n, h, w) = pool_dims(l.shape())?;
        let Some((a, b)) = l.contiguous_offsets() else { candle_core::bail!("avg-pool expects a contiguous input") };
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(pool_fwd(&x[a..b], n, h, w)),
            CpuStorage::F64(x) => CpuStorage::F64(pool_fwd(&x[a..b], n, h, w)),
            _ => candle_core::bail!("avg-pool supports f32 and f64"),
        };
        Ok((out, candle_core::Shape::from((n, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, h, w) = arg.dims3()?;
        let g = match arg.dtype() {
            DType::F32 => Tensor::from_vec(pool_bwd(&grad.flatten_all()?.to_vec1::<f32>()?, n, h, w), (n, h, w), arg.device())?,
            DType::F64 => Tensor::from_vec(pool_bwd(&grad.flatten_all()?.to_vec1::<f64>()?, n, h, w), (n, h, w), arg.device())?,
            dt => candle_core::bail!("avg-pool: unsupported dtype {dt:?}"),
        };
        Ok(Some(g))
    }
}
