//! Thin building blocks over candle: every layer is composed of primitive
//! tensor ops so gradients flow through all of them.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{GroupNorm, Linear};

pub use super::conv::Conv2d;

use super::params::{Init, Scope};
use crate::error::Result;

pub fn linear(s: &mut Scope, din: usize, dout: usize, bias: bool) -> Result<Linear> {
    let bound = 1.0 / (din as f64).sqrt();
    linear_init(s, din, dout, bias, Init::Uniform(bound))
}

pub fn linear_init(s: &mut Scope, din: usize, dout: usize, bias: bool, init: Init) -> Result<Linear> {
    let w = s.param("weight", &[dout, din], init)?;
    let b = if bias {
        let b_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::Uniform(1.0 / (din as f64).sqrt()),
        };
        Some(s.param("bias", &[dout], b_init)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn conv2d(
    s: &mut Scope,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    init_zero: bool,
) -> Result<Conv2d> {
    let fan_in = (cin * kernel * kernel) as f64;
    let (wi, bi) = if init_zero {
        (Init::Zeros, Init::Zeros)
    } else {
        (Init::Uniform(1.0 / fan_in.sqrt()), Init::Uniform(1.0 / fan_in.sqrt()))
    };
    let w = s.param("weight", &[cout, cin, kernel, kernel], wi)?;
    let b = s.param("bias", &[cout], bi)?;
    Ok(Conv2d::new(w, Some(b), stride))
}

pub fn group_norm(s: &mut Scope, groups: usize, channels: usize) -> Result<GroupNorm> {
    let w = s.param("weight", &[channels], Init::Ones)?;
    let b = s.param("bias", &[channels], Init::Zeros)?;
    Ok(GroupNorm::new(w, b, channels, groups.min(channels), 1e-5)?)
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: s.param("weight", &[dim], Init::Ones)?,
            bias: s.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Residual convolution block with an additive timestep embedding.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: group_norm(&mut s.pp("norm1"), groups, cin)?,
            conv1: conv2d(&mut s.pp("conv1"), cin, cout, 3, 1, false)?,
            temb: linear(&mut s.pp("temb"), temb_dim, cout, true)?,
            norm2: group_norm(&mut s.pp("norm2"), groups, cout)?,
            conv2: conv2d(&mut s.pp("conv2"), cout, cout, 3, 1, false)?,
            skip: if cin != cout {
                Some(conv2d(&mut s.pp("skip"), cin, cout, 1, 1, false)?)
            } else {
                None
            },
        })
    }

    /// `x`: `[N, C, H, W]`; `temb`: `[N, temb_dim]`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        h + skip
    }
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Upsample {
            conv: conv2d(s, channels, channels, 3, 1, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

/// Sinusoidal timestep features, `[N, dim]`.
pub fn timestep_embedding(
    timesteps: &[usize],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = (t as f64 * freq).sin();
            row[half + i] = (t as f64 * freq).cos();
        }
        data.extend(row);
    }
    Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)
}

/// Timestep MLP: sinusoid -> linear -> SiLU -> linear.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    base_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(s: &mut Scope, base_dim: usize, dim: usize) -> Result<Self> {
        Ok(TimeEmbedding {
            base_dim,
            fc1: linear(&mut s.pp("fc1"), base_dim, dim, true)?,
            fc2: linear(&mut s.pp("fc2"), dim, dim, true)?,
        })
    }

    pub fn forward(&self, timesteps: &[usize], like: &Tensor) -> candle_core::Result<Tensor> {
        let e = timestep_embedding(timesteps, self.base_dim, like.dtype(), like.device())?;
        self.fc2.forward(&self.fc1.forward(&e)?.silu()?)
    }
}
