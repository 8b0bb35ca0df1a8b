use candle_core::{Tensor, D};

use super::conv::conv2d;
use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(vb: &Builder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(vb, c_in, c_out, k, stride, Init::FanInUniform { fan_in: c_in * k * k })
    }

    pub fn zeroed(vb: &Builder, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_init(vb, c_in, c_out, k, 1, Init::Zeros)
    }

    fn with_init(vb: &Builder, c_in: usize, c_out: usize, k: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = vb.get("weight", &[c_out, c_in, k, k], init)?;
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::FanInUniform { fan_in: c_in * k * k },
        };
        let bias = vb.get("bias", &[c_out], bias_init)?;
        Ok(Self { weight, bias, stride, pad: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.bias.dims1().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vb: &Builder, d_in: usize, d_out: usize) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: d_in };
        Ok(Self { weight: vb.get("weight", &[d_out, d_in], init)?, bias: vb.get("bias", &[d_out], init)? })
    }

    pub fn zeroed(vb: &Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get("weight", &[d_out, d_in], Init::Zeros)?,
            bias: vb.get("bias", &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(vb: &Builder, n: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: vb.get("weight", &[n, dim], Init::Normal { std: 1.0 })? })
    }

    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.table.index_select(ids, 0)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_core::Tensor::silu(x)?)
}

/// Mean over every axis except the leading batch axis.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.mean(D::Minus1)?)
}
