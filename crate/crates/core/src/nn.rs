//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] and are initialized from a seed derived
//! from the store seed and the parameter's full name, so a model's initial
//! weights never depend on construction order or on candle's global RNG.
//! Convolutions are lowered to im2col + matmul.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// PyTorch-style default for weights: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        ParamStore {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    /// All parameters ordered by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.lock().values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; the name sets must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.lock();
        for name in tensors.keys() {
            if !vars.contains_key(name) {
                return Err(Error::Validation(format!(
                    "checkpoint has unknown parameter `{name}`"
                )));
            }
        }
        for (name, var) in vars.iter() {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Validation(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Var>> {
        self.vars.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn get_or_init(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.lock();
        if let Some(v) = vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` requested with shape {shape:?}, exists as {:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let mut rng = self.rng_for(&name);
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let mut rng = self.rng_for(&name);
                (0..n)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z })
                    .collect::<Vec<f64>>()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(out)
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// A name-scoped view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: Params<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: p.get(&[out_dim, in_dim], "weight", Init::fan_in(in_dim))?,
            bias: p.get(&[out_dim], "bias", Init::fan_in(in_dim))?,
        })
    }

    pub fn with_init(p: Params<'_>, in_dim: usize, out_dim: usize, weight: Init, bias: Init) -> Result<Self> {
        Ok(Linear {
            weight: p.get(&[out_dim, in_dim], "weight", weight)?,
            bias: p.get(&[out_dim], "bias", bias)?,
        })
    }

    pub fn device(&self) -> Device {
        self.weight.device().clone()
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }

    /// Applies the layer over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    /// `kernel` must be 1 or 3; a 3x3 kernel is zero-padded by one pixel.
    pub fn new(p: Params<'_>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Self::with_init(p, in_channels, out_channels, kernel, stride, Init::fan_in(fan_in), Init::fan_in(fan_in))
    }

    pub fn with_init(
        p: Params<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("unsupported kernel size {kernel}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("unsupported stride {stride}")));
        }
        Ok(Conv2d {
            weight: p.get(&[out_channels, in_channels * kernel * kernel], "weight", weight)?,
            bias: p.get(&[out_channels], "bias", bias)?,
            kernel,
            stride,
            in_channels,
            out_channels,
        })
    }

    /// A zero-initialized 1x1 projection.
    pub fn zeros(p: Params<'_>, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::with_init(p, in_channels, out_channels, 1, 1, Init::Const(0.0), Init::Const(0.0))
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (cols, ho, wo) = if self.kernel == 1 {
            let x = if self.stride == 2 { subsample2(x)? } else { x.clone() };
            let (_, _, ho, wo) = x.dims4()?;
            (x.reshape((b, c, ho * wo))?, ho, wo)
        } else {
            let (ho, wo) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
            let xp = x.pad_with_zeros(2, 1, 1 + self.stride * ho - h)?;
            let xp = xp.pad_with_zeros(3, 1, 1 + self.stride * wo - w)?;
            let mut taps = Vec::with_capacity(9);
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = xp
                        .narrow(2, ky, self.stride * ho)?
                        .narrow(3, kx, self.stride * wo)?;
                    taps.push(if self.stride == 2 { subsample2(&tap)? } else { tap });
                }
            }
            let cols = Tensor::stack(&taps, 2)?.reshape((b, c * 9, ho * wo))?;
            (cols, ho, wo)
        };
        let out = self.weight.broadcast_matmul(&cols)?;
        let out = out.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(out.reshape((b, self.out_channels, ho, wo))?)
    }
}

/// Keeps every second row and column (top-left phase).
fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    Ok(x.narrow(3, 0, 1)?.narrow(5, 0, 1)?.reshape((b, c, h / 2, w / 2))?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(p: Params<'_>, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        let weight = p.get(&[channels], "weight", Init::Const(1.0))?;
        let bias = p.get(&[channels], "bias", Init::Const(0.0))?;
        Ok(GroupNorm {
            inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|g| n % g == 0).unwrap_or(1)
}

/// Single-head scaled dot-product attention from a feature map onto a token sequence.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    scale: f64,
}

impl CrossAttention {
    pub fn new(p: Params<'_>, channels: usize, context_dim: usize, groups: usize) -> Result<Self> {
        Ok(CrossAttention {
            norm: GroupNorm::new(p.pp("norm"), channels, groups)?,
            to_q: Linear::new(p.pp("to_q"), channels, channels)?,
            to_k: Linear::new(p.pp("to_k"), context_dim, channels)?,
            to_v: Linear::new(p.pp("to_v"), context_dim, channels)?,
            to_out: Linear::new(p.pp("to_out"), channels, channels)?,
            scale: 1.0 / (channels as f64).sqrt(),
        })
    }

    /// `x`: `(B, C, H, W)`, `context`: `(B, L, context_dim)`. Returns `x + attn(x)`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * self.scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = self.to_out.forward(&attn.matmul(&v)?)?;
        let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// `(B, C, H, W)` to `(B, C*p*p, H/p, W/p)`.
pub fn pixel_unshuffle(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    Ok(x
        .reshape(vec![b, c, h / p, p, w / p, p])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .reshape((b, c * p * p, h / p, w / p))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, cpp, h, w) = x.dims4()?;
    let c = cpp / (p * p);
    Ok(x
        .reshape(vec![b, c, p, p, h, w])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .reshape((b, c, h * p, w * p))?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape(vec![b, c, h, 1, w, 1])?
        .broadcast_as(vec![b, c, h, 2, w, 2])?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.cos();
            row[half + i] = arg.sin();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}
