//! U-shaped convolutional denoiser with time and class conditioning.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::LATENT_CHANNELS;
use crate::error::{LabError, Result};
use crate::nn::{silu, Builder, Conv2d, Embedding, Linear, ParamSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    /// Real classes; one extra null class is appended.
    pub classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { base_channels: 64, time_dim: 128, emb_dim: 256, classes: 4 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.emb_dim == 0 || self.classes == 0 {
            return Err(LabError::config("denoiser: base_channels, emb_dim and classes must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(LabError::config(format!("denoiser: time_dim must be even, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// `[sin(t f_i), cos(t f_i)]` with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| tv * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    modulation: Linear,
    skip: Option<Conv2d>,
    channels: usize,
}

impl ResBlock {
    fn new(vb: &Builder, c_in: usize, c_out: usize, emb_dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&vb.pp("conv1"), c_in, c_out, 3, 1)?,
            conv2: Conv2d::new(&vb.pp("conv2"), c_out, c_out, 3, 1)?,
            modulation: Linear::zeroed(&vb.pp("modulation"), emb_dim, 2 * c_out)?,
            skip: if c_in != c_out { Some(Conv2d::new(&vb.pp("skip"), c_in, c_out, 1, 1)?) } else { None },
            channels: c_out,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(x)?)?;
        let ss = self.modulation.forward(&silu(emb)?)?;
        let c = self.channels;
        let scale = ss.narrow(1, 0, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let shift = ss.narrow(1, c, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = (h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift))?;
        let h = self.conv2.forward(&silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

fn upsample(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

pub struct DenoiserModel {
    cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    class_emb: Embedding,
    conv_in: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res2: ResBlock,
    down2: Conv2d,
    mid: ResBlock,
    up2: Conv2d,
    res_up2: ResBlock,
    up1: Conv2d,
    res_up1: ResBlock,
    conv_out: Conv2d,
}

impl DenoiserModel {
    /// Parameters live under `model.*`.
    pub fn new(src: &ParamSource, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let vb = src.root().pp("model");
        let (c, e) = (cfg.base_channels, cfg.emb_dim);
        Ok(Self {
            cfg,
            time1: Linear::new(&vb.pp("time1"), cfg.time_dim, e)?,
            time2: Linear::new(&vb.pp("time2"), e, e)?,
            class_emb: Embedding::new(&vb.pp("class_emb"), cfg.classes + 1, e)?,
            conv_in: Conv2d::new(&vb.pp("conv_in"), LATENT_CHANNELS, c, 3, 1)?,
            res1: ResBlock::new(&vb.pp("res1"), c, c, e)?,
            down1: Conv2d::new(&vb.pp("down1"), c, 2 * c, 3, 2)?,
            res2: ResBlock::new(&vb.pp("res2"), 2 * c, 2 * c, e)?,
            down2: Conv2d::new(&vb.pp("down2"), 2 * c, 2 * c, 3, 2)?,
            mid: ResBlock::new(&vb.pp("mid"), 2 * c, 2 * c, e)?,
            up2: Conv2d::new(&vb.pp("up2"), 2 * c, 2 * c, 3, 1)?,
            res_up2: ResBlock::new(&vb.pp("res_up2"), 4 * c, 2 * c, e)?,
            up1: Conv2d::new(&vb.pp("up1"), 2 * c, c, 3, 1)?,
            res_up1: ResBlock::new(&vb.pp("res_up1"), 2 * c, c, e)?,
            conv_out: Conv2d::zeroed(&vb.pp("conv_out"), c, LATENT_CHANNELS, 3)?,
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    pub fn null_class(&self) -> u32 {
        self.cfg.classes as u32
    }

    /// `z`: `(B, 4, r, r)` with `r` divisible by 4; `t`: model time per sample;
    /// `labels`: class ids, `classes` meaning unconditional.
    pub fn forward(&self, z: &Tensor, t: &[f64], labels: &[u32]) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        if c != LATENT_CHANNELS || h % 4 != 0 || w % 4 != 0 || t.len() != b || labels.len() != b {
            return Err(LabError::shape(format!(
                "denoiser input {:?} with {} times and {} labels",
                z.dims(),
                t.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > self.null_class()) {
            return Err(LabError::config(format!("class label {bad} out of range")));
        }
        let dtype = z.dtype();
        let temb = Tensor::from_vec(timestep_embedding(t, self.cfg.time_dim), (b, self.cfg.time_dim), &Device::Cpu)?
            .to_dtype(dtype)?;
        let temb = self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?;
        let ids = Tensor::from_vec(labels.to_vec(), b, &Device::Cpu)?;
        let emb = (temb + self.class_emb.forward(&ids)?)?;

        let h1 = self.res1.forward(&self.conv_in.forward(z)?, &emb)?;
        let h2 = self.res2.forward(&self.down1.forward(&h1)?, &emb)?;
        let m = self.mid.forward(&self.down2.forward(&h2)?, &emb)?;
        let u2 = self.up2.forward(&upsample(&m)?)?;
        let u2 = self.res_up2.forward(&Tensor::cat(&[&u2, &h2], 1)?, &emb)?;
        let u1 = self.up1.forward(&upsample(&u2)?)?;
        let u1 = self.res_up1.forward(&Tensor::cat(&[&u1, &h1], 1)?, &emb)?;
        self.conv_out.forward(&silu(&u1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn output_matches_input_shape() -> Result<()> {
        let src = ParamSource::fresh(0, DType::F32);
        let m = DenoiserModel::new(&src, DenoiserConfig { base_channels: 8, ..Default::default() })?;
        let z = Tensor::ones((3, 4, 8, 8), DType::F32, &Device::Cpu)?;
        let y = m.forward(&z, &[1.0, 500.0, 1000.0], &[0, 1, 4])?;
        assert_eq!(y.dims(), z.dims());
        assert!(m.forward(&z, &[1.0], &[0]).is_err());
        assert!(m.forward(&z, &[1.0; 3], &[0, 0, 5]).is_err());
        Ok(())
    }

    #[test]
    fn default_size_is_a_few_million() {
        let src = ParamSource::fresh(0, DType::F32);
        DenoiserModel::new(&src, DenoiserConfig::default()).unwrap();
        let n = src.into_store().unwrap().num_scalars();
        assert!((1_000_000..3_000_000).contains(&n), "{n}");
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(&[0.0, 2.0], 4);
        assert_eq!(&e[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e[4] - 2f64.sin()).abs() < 1e-15);
        assert!((e[5] - (2.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
