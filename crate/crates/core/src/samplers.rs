//! Deterministic DDIM and Euler sampling with classifier-free guidance.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::LATENT_CHANNELS;
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{per_sample, recover_x0, Framework, NoiseSchedule, ScheduleKind};
use crate::error::{LabError, Result};
use crate::nn::{ParamSource, TensorMap};
use crate::trainer::{gaussian_tensor, model_time};

/// Anything that maps `(z_t, t, labels)` to a prediction in its framework's parameterization.
/// `t` is schedule time (DDPM step index or flow time).
pub trait Denoiser {
    fn predict(&self, z_t: &Tensor, t: &[f64], labels: &[u32]) -> Result<Tensor>;
    fn null_class(&self) -> u32;
}

/// A trained network together with the framework it was trained for.
pub struct NetworkDenoiser {
    pub model: DenoiserModel,
    pub framework: Framework,
}

impl NetworkDenoiser {
    /// Builds a frozen network from `model.*` tensors (online or EMA weights).
    pub fn from_tensors(map: &TensorMap, cfg: DenoiserConfig, framework: Framework) -> Result<Self> {
        let src = ParamSource::frozen(map.clone(), DType::F32);
        Ok(Self { model: DenoiserModel::new(&src, cfg)?, framework })
    }
}

impl Denoiser for NetworkDenoiser {
    fn predict(&self, z_t: &Tensor, t: &[f64], labels: &[u32]) -> Result<Tensor> {
        let tm: Vec<f64> = t.iter().map(|&v| model_time(self.framework, v)).collect();
        self.model.forward(z_t, &tm, labels)
    }

    fn null_class(&self) -> u32 {
        self.model.null_class()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub count: usize,
    pub batch_size: usize,
    pub use_ema: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 1.5, count: 256, batch_size: 64, use_ema: true, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.count == 0 || self.batch_size == 0 {
            return Err(LabError::config("sampler: steps, count and batch_size must be positive"));
        }
        if !(self.guidance >= 0.0) {
            return Err(LabError::config(format!("sampler.guidance must be >= 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub labels: Vec<u32>,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    /// Latent side length.
    pub resolution: usize,
    pub batch_size: usize,
}

impl SampleRequest {
    /// Labels cycle through `0..classes`.
    pub fn from_config(cfg: &SamplerConfig, classes: usize, resolution: usize) -> Self {
        Self {
            labels: (0..cfg.count).map(|i| (i % classes.max(1)) as u32).collect(),
            guidance: cfg.guidance,
            steps: cfg.steps,
            seed: cfg.seed,
            resolution,
            batch_size: cfg.batch_size,
        }
    }

    pub fn initial_noise(&self) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        gaussian_tensor(&mut rng, &[self.labels.len(), LATENT_CHANNELS, self.resolution, self.resolution], DType::F32)
    }
}

/// `pred_null + lambda * (pred_cond - pred_null)`; `lambda = 1` never evaluates the null branch.
pub fn guided_prediction(model: &dyn Denoiser, z_t: &Tensor, t: &[f64], labels: &[u32], guidance: f64) -> Result<Tensor> {
    if guidance == 1.0 {
        return model.predict(z_t, t, labels);
    }
    let null = vec![model.null_class(); labels.len()];
    let p_null = model.predict(z_t, t, &null)?;
    if guidance == 0.0 {
        return Ok(p_null);
    }
    let p_cond = model.predict(z_t, t, labels)?;
    Ok((&p_null + ((p_cond - &p_null)? * guidance)?)?)
}

/// `t_i = T - floor(i T / S)` for `i = 0..S`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| total - i * total / steps).collect()
}

fn batched(
    req: &SampleRequest,
    mut body: impl FnMut(Tensor, &[u32]) -> Result<Tensor>,
) -> Result<Tensor> {
    let noise = req.initial_noise()?;
    let n = req.labels.len();
    let mut parts = Vec::new();
    for start in (0..n).step_by(req.batch_size.max(1)) {
        let len = req.batch_size.max(1).min(n - start);
        parts.push(body(noise.narrow(0, start, len)?, &req.labels[start..start + len])?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Deterministic DDIM (eta = 0) for eps- and v-parameterized models.
pub fn ddim_sample(model: &dyn Denoiser, framework: Framework, schedule: &NoiseSchedule, req: &SampleRequest) -> Result<Tensor> {
    if schedule.kind() != ScheduleKind::DdpmDiscrete || framework == Framework::Flow {
        return Err(LabError::config("DDIM sampling needs a discrete DDPM schedule and an eps or v model"));
    }
    if req.steps == 0 || req.steps > schedule.steps() {
        return Err(LabError::config(format!("DDIM steps {} outside 1..={}", req.steps, schedule.steps())));
    }
    let ts = ddim_timesteps(schedule.steps(), req.steps);
    batched(req, |mut z, labels| {
        let b = labels.len();
        for (i, &t) in ts.iter().enumerate() {
            let (a, s) = schedule.coefficients(t as f64)?;
            let tv = vec![t as f64; b];
            let pred = guided_prediction(model, &z, &tv, labels, req.guidance)?;
            let z0 = recover_x0(framework, &z, &pred, &vec![a; b], &vec![s; b])?;
            let eps = match framework {
                Framework::Eps => pred,
                _ => ((&z * s)? + (pred * a)?)?,
            };
            let (a_next, s_next) = match ts.get(i + 1) {
                Some(&tn) => schedule.coefficients(tn as f64)?,
                None => (1.0, 0.0),
            };
            z = ((z0.broadcast_mul(&per_sample(&vec![a_next; b], &z)?))? + (eps * s_next)?)?;
        }
        Ok(z)
    })
}

/// Euler integration of the predicted velocity from `t = 1` to `t = 0`.
pub fn euler_sample(model: &dyn Denoiser, req: &SampleRequest) -> Result<Tensor> {
    if req.steps == 0 {
        return Err(LabError::config("Euler sampling needs at least one step"));
    }
    let h = 1.0 / req.steps as f64;
    batched(req, |mut z, labels| {
        for i in 0..req.steps {
            let t = 1.0 - i as f64 * h;
            let v = guided_prediction(model, &z, &vec![t; labels.len()], labels, req.guidance)?;
            z = (z - (v * h)?)?;
        }
        Ok(z)
    })
}

/// DDIM for DDPM frameworks, Euler for flow.
pub fn sample(model: &dyn Denoiser, framework: Framework, schedule: &NoiseSchedule, req: &SampleRequest) -> Result<Tensor> {
    match framework {
        Framework::Flow => euler_sample(model, req),
        _ => ddim_sample(model, framework, schedule, req),
    }
}
