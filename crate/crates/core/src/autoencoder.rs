//! Small convolutional autoencoder whose decoder exposes four feature taps.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{checksum, silu, AdamW, AdamWConfig, Builder, Conv2d, ParamSource, TensorMap};
use crate::toydata::{ImageSet, AE_FACTOR};

pub const LATENT_CHANNELS: usize = 4;
pub const ENCODER_WIDTHS: [usize; 2] = [32, 64];
pub const TAP_WIDTHS: [usize; 4] = [64, 64, 32, 32];
pub const LATENT_PENALTY: f64 = 1e-6;

/// Decoder activations in decoder order, each `(B, C_l, r_l, r_l)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub features: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.dims()[2]).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.dims()[1]).collect()
    }
}

struct Encoder {
    down1: Conv2d,
    down2: Conv2d,
    out: Conv2d,
}

impl Encoder {
    fn new(vb: &Builder) -> Result<Self> {
        let [w1, w2] = ENCODER_WIDTHS;
        Ok(Self {
            down1: Conv2d::new(&vb.pp("down1"), 3, w1, 3, 2)?,
            down2: Conv2d::new(&vb.pp("down2"), w1, w2, 3, 2)?,
            out: Conv2d::new(&vb.pp("out"), w2, LATENT_CHANNELS, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.down1.forward(x)?)?;
        let h = silu(&self.down2.forward(&h)?)?;
        self.out.forward(&h)
    }
}

struct Decoder {
    taps: [Conv2d; 4],
    out: Conv2d,
}

impl Decoder {
    fn new(vb: &Builder) -> Result<Self> {
        let [c1, c2, c3, c4] = TAP_WIDTHS;
        Ok(Self {
            taps: [
                Conv2d::new(&vb.pp("tap1"), LATENT_CHANNELS, c1, 3, 1)?,
                Conv2d::new(&vb.pp("tap2"), c1, c2, 3, 1)?,
                Conv2d::new(&vb.pp("tap3"), c2, c3, 3, 1)?,
                Conv2d::new(&vb.pp("tap4"), c3, c4, 3, 1)?,
            ],
            out: Conv2d::new(&vb.pp("out"), c4, 3, 3, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<(FeaturePyramid, Tensor)> {
        let mut features = Vec::with_capacity(4);
        let mut h = z.clone();
        for (i, conv) in self.taps.iter().enumerate() {
            if i == 1 || i == 2 {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
            h = silu(&conv.forward(&h)?)?;
            features.push(h.clone());
        }
        let img = self.out.forward(&h)?.tanh()?;
        Ok((FeaturePyramid { features }, img))
    }
}

/// Encoder, decoder and the latent normalization multiplier.
///
/// A model built by [`AutoencoderModel::from_tensors`] holds plain tensors and
/// never receives gradients for its weights.
pub struct AutoencoderModel {
    encoder: Encoder,
    decoder: Decoder,
    latent_scale: f64,
    resolution: usize,
    dtype: DType,
    frozen: bool,
    weights: TensorMap,
}

impl AutoencoderModel {
    fn build(src: &ParamSource, latent_scale: f64, resolution: usize, frozen: bool, weights: TensorMap) -> Result<Self> {
        if !(latent_scale > 0.0 && latent_scale.is_finite()) {
            return Err(LabError::config(format!("latent_scale must be positive, got {latent_scale}")));
        }
        if resolution == 0 || resolution % AE_FACTOR != 0 {
            return Err(LabError::config(format!("resolution {resolution} is not a multiple of {AE_FACTOR}")));
        }
        let root = src.root().pp("ae");
        Ok(Self {
            encoder: Encoder::new(&root.pp("encoder"))?,
            decoder: Decoder::new(&root.pp("decoder"))?,
            latent_scale,
            resolution,
            dtype: src.dtype(),
            frozen,
            weights,
        })
    }

    /// Randomly initialized frozen model (useful as a fixed differentiable map).
    pub fn random(seed: u64, resolution: usize, dtype: DType) -> Result<Self> {
        let src = ParamSource::fresh(seed, dtype);
        Self::build(&src, 1.0, resolution, false, TensorMap::new())?;
        let weights = src.into_store()?.snapshot()?;
        Self::from_weights(weights, 1.0, resolution, dtype)
    }

    fn from_weights(weights: TensorMap, latent_scale: f64, resolution: usize, dtype: DType) -> Result<Self> {
        let src = ParamSource::frozen(weights.clone(), dtype);
        Self::build(&src, latent_scale, resolution, true, weights)
    }

    /// Loads `ae.encoder.*`, `ae.decoder.*`, `ae.latent_scale` and `ae.resolution`.
    pub fn from_tensors(map: &TensorMap, dtype: DType) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            let t = map.get(name).ok_or_else(|| LabError::MissingInput(format!("checkpoint entry {name}")))?;
            Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?.first().copied().unwrap_or(f64::NAN))
        };
        let latent_scale = scalar("ae.latent_scale")?;
        let resolution = scalar("ae.resolution")? as usize;
        let weights: TensorMap = map
            .iter()
            .filter(|(k, _)| k.starts_with("ae.encoder.") || k.starts_with("ae.decoder."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self::from_weights(weights, latent_scale, resolution, dtype)
    }

    pub fn to_tensors(&self) -> Result<TensorMap> {
        let mut map = self.weights.clone();
        map.insert("ae.latent_scale".into(), Tensor::new(self.latent_scale, &Device::Cpu)?);
        map.insert("ae.resolution".into(), Tensor::new(self.resolution as f64, &Device::Cpu)?);
        Ok(map)
    }

    /// Same weights in another floating-point precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_weights(self.weights.clone(), self.latent_scale, self.resolution, dtype)
    }

    pub fn checksum(&self) -> Result<u64> {
        checksum(&self.to_tensors()?)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn latent_resolution(&self) -> usize {
        self.resolution / AE_FACTOR
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Tap resolutions for this model's image size.
    pub fn tap_resolutions(&self) -> Vec<usize> {
        let r = self.latent_resolution();
        vec![r, 2 * r, 4 * r, 4 * r]
    }

    fn raw_encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(LabError::shape(format!(
                "encoder expects (B, 3, {r}, {r}), got {:?}",
                images.dims(),
                r = self.resolution
            )));
        }
        self.encoder.forward(&images.to_dtype(self.dtype)?)
    }

    /// `(B, 3, R, R)` images in `[-1, 1]` to `(B, 4, R/4, R/4)` scaled latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok((self.raw_encode(images)? * self.latent_scale)?)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(self.decode_with_taps(latents)?.1)
    }

    pub fn decode_with_taps(&self, latents: &Tensor) -> Result<(FeaturePyramid, Tensor)> {
        let r = self.latent_resolution();
        match latents.dims4() {
            Ok((_, c, h, w)) if c == LATENT_CHANNELS && h == r && w == r => {}
            _ => {
                return Err(LabError::shape(format!(
                    "decoder expects (B, {LATENT_CHANNELS}, {r}, {r}), got {:?}",
                    latents.dims()
                )))
            }
        }
        self.decoder.forward(&(latents / self.latent_scale)?)
    }

    /// Encodes a whole set in batches; returns `(N, 4, r, r)`.
    pub fn encode_set(&self, set: &ImageSet, batch: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let parts = idx
            .chunks(batch.max(1))
            .map(|c| self.encode(&set.batch_tensor(c, &Device::Cpu)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Decodes `(N, 4, r, r)` latents in batches into an image set.
    pub fn decode_set(&self, latents: &Tensor, labels: Vec<u32>, batch: usize) -> Result<ImageSet> {
        let n = latents.dims()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(batch.max(1)) {
            let len = batch.max(1).min(n - start);
            parts.push(self.decode(&latents.narrow(0, start, len)?)?);
        }
        ImageSet::from_tensor(&Tensor::cat(&parts, 0)?, labels)
    }

    /// Mean squared pixel error of `decode(encode(x))` over the set.
    pub fn reconstruction_mse(&self, set: &ImageSet, batch: usize) -> Result<f64> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut total = 0.0;
        for c in idx.chunks(batch.max(1)) {
            let x = set.batch_tensor(c, &Device::Cpu)?.to_dtype(self.dtype)?;
            let y = self.decode(&self.encode(&x)?)?;
            total += (y - x)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total / (set.len() * set.image_len()) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { steps: 10_000, batch_size: 16, lr: 1e-3, holdout_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub train_mse: f64,
    pub holdout_mse: f64,
    /// Standard deviation of unscaled latents over the corpus.
    pub raw_latent_std: f64,
    pub holdout_indices: Vec<usize>,
    /// `(step, loss)` every 100 steps.
    pub losses: Vec<(usize, f64)>,
}

/// Deterministic train/holdout split.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ae));
    let n_hold = ((n as f64 * holdout_fraction).round() as usize).min(n.saturating_sub(1));
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

/// Trains on the non-held-out images, sets `latent_scale` and returns the frozen model.
pub fn train_autoencoder(set: &ImageSet, cfg: &AeTrainConfig) -> Result<(AutoencoderModel, AeTrainReport)> {
    if set.resolution % AE_FACTOR != 0 {
        return Err(LabError::config(format!("dataset resolution {} not divisible by {AE_FACTOR}", set.resolution)));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.batch_size == 0 {
        return Err(LabError::config("autoencoder config: holdout_fraction in [0, 1) and batch_size > 0 required"));
    }
    let (train_idx, hold_idx) = split_indices(set.len(), cfg.holdout_fraction, cfg.seed);
    let src = ParamSource::fresh(cfg.seed, DType::F32);
    let model = AutoencoderModel::build(&src, 1.0, set.resolution, false, TensorMap::new())?;
    let store = src.into_store()?;
    let mut opt = AdamW::new(&store, AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let batch: Vec<usize> =
            (0..cfg.batch_size).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect();
        let x = set.batch_tensor(&batch, &Device::Cpu)?;
        let z = model.raw_encode(&x)?;
        let y = model.decode(&z)?;
        let loss = ((&y - &x)?.sqr()?.mean_all()? + (z.sqr()?.mean_all()? * LATENT_PENALTY)?)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(LabError::numerical(format!("autoencoder loss {value} at step {step}")));
        }
        opt.step(&loss.backward()?)?;
        if step % 100 == 0 || step + 1 == cfg.steps {
            losses.push((step, value));
            log::debug!("ae step {step} loss {value:.5}");
        }
    }
    let weights = store.snapshot()?;
    let unscaled = AutoencoderModel::from_weights(weights.clone(), 1.0, set.resolution, DType::F32)?;
    let raw = unscaled.encode_set(set, 64)?.flatten_all()?.to_dtype(DType::F64)?;
    let mean = raw.mean_all()?.to_scalar::<f64>()?;
    let raw_latent_std = raw.broadcast_sub(&Tensor::new(mean, &Device::Cpu)?)?.sqr()?.mean_all()?.to_scalar::<f64>()?.sqrt();
    if !(raw_latent_std > 0.0 && raw_latent_std.is_finite()) {
        return Err(LabError::numerical(format!("degenerate latent std {raw_latent_std}")));
    }
    let model = AutoencoderModel::from_weights(weights, 1.0 / raw_latent_std, set.resolution, DType::F32)?;
    let train_mse = model.reconstruction_mse(&set.subset(&train_idx), 64)?;
    let holdout_mse = if hold_idx.is_empty() { f64::NAN } else { model.reconstruction_mse(&set.subset(&hold_idx), 64)? };
    Ok((model, AeTrainReport { train_mse, holdout_mse, raw_latent_std, holdout_indices: hold_idx, losses }))
}
