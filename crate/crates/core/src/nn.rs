//! Parameter storage and the small set of layers the denoiser, text encoder
//! and learned codec are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::noise::Rng;

/// Named trainable tensors. Iteration order is the lexical order of names,
/// which fixes the order of optimizer updates and checkpoint layout.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// A view over several stores with prefixed names. The variables are
    /// shared, so updates through the view are visible in the sources.
    pub fn merged(parts: &[(&str, &ParamStore)]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to merge".into()))?;
        let mut out = Self::new(first.1.dtype, first.1.device.clone());
        for (prefix, store) in parts {
            for (k, v) in &store.vars {
                if out.vars.insert(join(prefix, k), v.clone()).is_some() {
                    return Err(Error::Config(format!("duplicate parameter {prefix}.{k}")));
                }
            }
        }
        Ok(out)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, rng: &mut Rng, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => crate::noise::normal_vec(rng, n).into_iter().map(|v| v * std).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`, which must hold exactly the
    /// same names and shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Creates parameters in a store from a seeded init rng.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self { store, rng }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.rng, name, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, path: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(b, path, fan_in, fan_out, Init::Uniform(bound))
    }

    pub fn zeroed(b: &mut Builder, path: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(b, path, fan_in, fan_out, Init::Zeros)
    }

    fn with_init(b: &mut Builder, path: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.param(&join(path, "weight"), &[fan_out, fan_in], init)?,
            bias: b.param(&join(path, "bias"), &[fan_out], init)?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: b.param(&join(path, "weight"), &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?,
            bias: b.param(&join(path, "bias"), &[c_out], Init::Uniform(bound))?,
            stride,
            padding: kernel / 2,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let y = xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// 1-D convolution over the last axis of an `(N, C, L)` input, same padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
}

impl Conv1d {
    pub fn zeroed(b: &mut Builder, path: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(&join(path, "weight"), &[c_out, c_in, kernel], Init::Zeros)?,
            bias: b.param(&join(path, "bias"), &[c_out], Init::Zeros)?,
        })
    }
}

// Built from shifted matmuls: the backward pass of candle's conv1d returns
// wrong weight gradients for batches larger than one.
impl Module for Conv1d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let kernel = self.weight.dim(2)?;
        let len = xs.dim(2)?;
        let pad = kernel / 2;
        let padded = xs.pad_with_zeros(2, pad, kernel - 1 - pad)?;
        let mut y = self.bias.reshape((1, (), 1))?;
        for tap in 0..kernel {
            let w = self.weight.narrow(2, tap, 1)?.squeeze(2)?;
            y = y.broadcast_add(&w.broadcast_matmul(&padded.narrow(2, tap, len)?)?)?;
        }
        Ok(y)
    }
}

pub fn group_norm(b: &mut Builder, path: &str, channels: usize) -> Result<candle_nn::GroupNorm> {
    let groups = [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1);
    let w = b.param(&join(path, "weight"), &[channels], Init::Ones)?;
    let bias = b.param(&join(path, "bias"), &[channels], Init::Zeros)?;
    Ok(candle_nn::GroupNorm::new(w, bias, channels, groups, 1e-5)?)
}

/// Layer norm over the last axis, composed from primitive ops so that it
/// differentiates at every precision.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, path: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(&join(path, "weight"), &[dim], Init::Ones)?,
            bias: b.param(&join(path, "bias"), &[dim], Init::Zeros)?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Multi-head attention. Queries come from `xs`; keys and values from
/// `context` (or `xs` itself for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        b: &mut Builder,
        path: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let to_out = if zero_out {
            Linear::zeroed(b, &join(path, "to_out"), dim, dim)?
        } else {
            Linear::new(b, &join(path, "to_out"), dim, dim)?
        };
        Ok(Self {
            to_q: Linear::new(b, &join(path, "to_q"), dim, dim)?,
            to_k: Linear::new(b, &join(path, "to_k"), context_dim, dim)?,
            to_v: Linear::new(b, &join(path, "to_v"), context_dim, dim)?,
            to_out,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (n, l, c) = xs.dims3()?;
        xs.reshape((n, l, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Attention probabilities `(N, heads, Lq, Lk)`. `mask` is an additive
    /// `(N, Lk)` bias (0 for visible keys, large negative for padding).
    pub fn probs(&self, xs: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.split_heads(&self.to_q.forward(xs)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let dh = q.dim(D::Minus1)? as f64;
        let mut scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.affine(1.0 / dh.sqrt(), 0.0)?;
        if let Some(m) = mask {
            let (n, lk) = m.dims2()?;
            scores = scores.broadcast_add(&m.reshape((n, 1, 1, lk))?)?;
        }
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    pub fn forward(&self, xs: &Tensor, context: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        let ctx = context.unwrap_or(xs);
        let p = self.probs(xs, ctx, mask)?;
        let v = self.split_heads(&self.to_v.forward(ctx)?)?;
        let (n, _, lq, _) = p.dims4()?;
        let out = p.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, lq, ()))?;
        Ok(self.to_out.forward(&out)?)
    }
}

/// Sinusoidal embedding of (possibly fractional) step values, shape
/// `(len(steps), dim)`.
pub fn sinusoidal_embedding(steps: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            data.push(if i < half { (t * freq).sin() } else { (t * freq).cos() });
        }
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?.to_dtype(dtype)?)
}
