//! Two-phase generator training: diffusion loss only, then diffusion loss plus LPL.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{
    add_noise, diffusion_loss, per_sample_mse, recover_x0, timestep_reweighting, training_target, Framework,
    NoiseSchedule,
};
use crate::error::{LabError, Result};
use crate::lpl::{latent_perceptual_loss, total_loss};
use crate::nn::{AdamW, AdamWConfig, ParamSource, ParamStore, TensorMap};
use crate::toydata::ImageSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    Uniform,
    /// `sigmoid(N(0, 1))` for flow time; discrete schedules ignore it.
    LogitNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema_pretrain: f64,
    pub ema_with_lpl: f64,
    pub ema_without_lpl: f64,
    pub p_drop: f64,
    pub timestep_sampling: TimestepSampling,
    /// Fixed variance ratio for the diffusion-loss reweighting control; off when absent.
    pub reweighting_ratio: Option<f64>,
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            phase1_steps: 20_000,
            phase2_steps: 10_000,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            ema_pretrain: 0.9999,
            ema_with_lpl: 0.99975,
            ema_without_lpl: 0.9999,
            p_drop: 0.1,
            timestep_sampling: TimestepSampling::Uniform,
            reweighting_ratio: None,
            checkpoint_every: 1000,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LabError::config("trainer.batch_size must be positive"));
        }
        for (name, g) in [
            ("ema_pretrain", self.ema_pretrain),
            ("ema_with_lpl", self.ema_with_lpl),
            ("ema_without_lpl", self.ema_without_lpl),
        ] {
            if !(0.0..=1.0).contains(&g) {
                return Err(LabError::config(format!("trainer.{name} = {g} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(LabError::config(format!("trainer.p_drop = {} outside [0, 1)", self.p_drop)));
        }
        if matches!(self.reweighting_ratio, Some(r) if !(r >= 0.0)) {
            return Err(LabError::config("trainer.reweighting_ratio must be >= 0"));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(LabError::config("trainer.optimizer.lr must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Posttrain,
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub phase: Phase,
    pub loss_diff: f64,
    pub loss_lpl: f64,
    pub loss_total: f64,
    pub gated_fraction: f64,
    pub per_layer_lpl: Vec<f64>,
    pub grad_norm: f64,
    pub gamma_ema: f64,
}

/// Time value fed to the network: DDPM step index, or flow time scaled to `[0, 1000]`.
pub fn model_time(framework: Framework, t: f64) -> f64 {
    match framework {
        Framework::Flow => t * 1000.0,
        _ => t,
    }
}

/// `ema <- gamma * ema + (1 - gamma) * params`.
pub fn ema_update(ema: &mut TensorMap, params: &ParamStore, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(LabError::config(format!("EMA decay {gamma} outside [0, 1]")));
    }
    for (name, var) in params.vars() {
        let e = ema.get_mut(name).ok_or_else(|| LabError::MissingInput(format!("EMA entry {name}")))?;
        if e.dims() != var.dims() {
            return Err(LabError::shape(format!("EMA entry {name}: {:?} vs {:?}", e.dims(), var.dims())));
        }
        *e = ((&*e * gamma)? + (var.as_tensor().detach() * (1.0 - gamma))?)?;
    }
    Ok(())
}

/// Timesteps for one batch: integers `1..=T` for DDPM, `(0, 1)` for flow.
pub fn sample_timesteps(schedule: &NoiseSchedule, mode: TimestepSampling, rng: &mut impl Rng, batch: usize) -> Vec<f64> {
    let steps = schedule.steps();
    (0..batch)
        .map(|_| {
            if steps > 0 {
                return rng.random_range(1..=steps) as f64;
            }
            match mode {
                TimestepSampling::Uniform => loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                },
                TimestepSampling::LogitNormal => {
                    let n: f64 = rng.sample(StandardNormal);
                    1.0 / (1.0 + (-n).exp())
                }
            }
        })
        .collect()
}

/// Replaces each label by `null_class` with probability `p_drop`.
pub fn cfg_dropout(labels: &[u32], p_drop: f64, null_class: u32, rng: &mut impl Rng) -> Vec<u32> {
    labels.iter().map(|&l| if rng.random::<f64>() < p_drop { null_class } else { l }).collect()
}

pub fn gaussian_tensor(rng: &mut impl Rng, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

const STEP_STREAM_KEY: u64 = 0x7472_6169_6e00;

pub struct Trainer<'a> {
    cfg: RunConfig,
    ae: &'a AutoencoderModel,
    schedule: NoiseSchedule,
    latents: Tensor,
    labels: Vec<u32>,
    params: ParamStore,
    model: DenoiserModel,
    ema: TensorMap,
    opt: AdamW,
    step: u64,
    ae_checksum: u64,
}

impl<'a> Trainer<'a> {
    /// Encodes the dataset once and initializes the denoiser from the run seed.
    pub fn new(cfg: &RunConfig, dataset: &ImageSet, ae: &'a AutoencoderModel) -> Result<Self> {
        cfg.validate()?;
        if !ae.is_frozen() {
            return Err(LabError::config("generator training needs a frozen autoencoder"));
        }
        if dataset.resolution != ae.resolution() || dataset.is_empty() {
            return Err(LabError::shape(format!(
                "dataset at {}px ({} images) for an autoencoder trained at {}px",
                dataset.resolution,
                dataset.len(),
                ae.resolution()
            )));
        }
        if let Some(&l) = dataset.labels.iter().find(|&&l| l as usize >= cfg.denoiser.classes) {
            return Err(LabError::config(format!("dataset label {l} >= denoiser.classes")));
        }
        let latents = ae.encode_set(dataset, 64)?.to_dtype(DType::F32)?;
        let src = ParamSource::fresh(cfg.seed, DType::F32);
        let model = DenoiserModel::new(&src, cfg.denoiser)?;
        let params = src.into_store()?;
        let ema = params.snapshot()?;
        let opt = AdamW::new(&params, cfg.trainer.optimizer)?;
        Ok(Self {
            cfg: cfg.clone(),
            ae,
            schedule: cfg.schedule()?,
            latents,
            labels: dataset.labels.clone(),
            params,
            model,
            ema,
            opt,
            step: 0,
            ae_checksum: ae.checksum()?,
        })
    }

    /// Restores model, EMA, optimizer state and step counter from a checkpoint map.
    pub fn resume(cfg: &RunConfig, dataset: &ImageSet, ae: &'a AutoencoderModel, ckpt: &TensorMap) -> Result<Self> {
        let mut t = Self::new(cfg, dataset, ae)?;
        let step = ckpt
            .get("state.step")
            .ok_or_else(|| LabError::MissingInput("checkpoint entry state.step".into()))?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()? as u64;
        t.params.load(&checkpoint::strip_prefix(ckpt, "online."))?;
        let ema = checkpoint::strip_prefix(ckpt, "ema.");
        for (k, v) in t.ema.iter_mut() {
            let e = ema.get(k).ok_or_else(|| LabError::MissingInput(format!("checkpoint entry ema.{k}")))?;
            *v = e.to_dtype(DType::F32)?;
        }
        t.opt.restore(&checkpoint::strip_prefix(ckpt, "opt."), step)?;
        t.step = step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.cfg.trainer.phase1_steps {
            Phase::Pretrain
        } else {
            Phase::Posttrain
        }
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn ema(&self) -> &TensorMap {
        &self.ema
    }

    pub fn gamma(&self, phase: Phase) -> f64 {
        let t = &self.cfg.trainer;
        match phase {
            Phase::Pretrain => t.ema_pretrain,
            Phase::Posttrain if self.cfg.lpl.enabled => t.ema_with_lpl,
            Phase::Posttrain => t.ema_without_lpl,
        }
    }

    /// Online weights under `online.*`, EMA under `ema.*`, optimizer moments under `opt.*`, step as `state.step`.
    pub fn checkpoint_tensors(&self) -> Result<TensorMap> {
        let mut map = checkpoint::add_prefix(&self.params.snapshot()?, "online.");
        map.extend(checkpoint::add_prefix(&self.ema, "ema."));
        map.extend(checkpoint::add_prefix(&self.opt.state(), "opt."));
        map.insert("state.step".into(), Tensor::new(self.step as f64, &Device::Cpu)?);
        Ok(map)
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let phase = self.phase();
        let cfg = &self.cfg;
        let tc = &cfg.trainer;
        let b = tc.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STEP_STREAM_KEY);
        rng.set_stream(self.step);

        let idx: Vec<u32> = (0..b).map(|_| rng.random_range(0..self.labels.len()) as u32).collect();
        let labels: Vec<u32> = idx.iter().map(|&i| self.labels[i as usize]).collect();
        let labels = cfg_dropout(&labels, tc.p_drop, self.model.null_class(), &mut rng);
        let t = sample_timesteps(&self.schedule, tc.timestep_sampling, &mut rng, b);
        let z0 = self.latents.index_select(&Tensor::from_vec(idx, b, &Device::Cpu)?, 0)?;
        let eps = gaussian_tensor(&mut rng, z0.dims(), DType::F32)?;

        let coeffs = t.iter().map(|&tv| self.schedule.coefficients(tv)).collect::<Result<Vec<_>>>()?;
        let alpha: Vec<f64> = coeffs.iter().map(|c| c.0).collect();
        let sigma: Vec<f64> = coeffs.iter().map(|c| c.1).collect();
        let tau = cfg.lpl.threshold(self.ae.resolution());
        let gate = t.iter().map(|&tv| self.schedule.gate(tv, tau)).collect::<Result<Vec<_>>>()?;
        let gated_fraction = gate.iter().filter(|&&g| g).count() as f64 / b as f64;

        let zt = add_noise(&z0, &eps, &alpha, &sigma)?;
        let target = training_target(cfg.framework, &z0, &eps, &alpha, &sigma)?;
        let tm: Vec<f64> = t.iter().map(|&tv| model_time(cfg.framework, tv)).collect();
        let pred = self.model.forward(&zt, &tm, &labels)?;

        let loss_diff = match (phase, tc.reweighting_ratio) {
            (Phase::Posttrain, Some(ratio)) => {
                let w: Vec<f64> = gate.iter().map(|&g| timestep_reweighting(g, cfg.lpl.w_lpl, ratio)).collect();
                let w = Tensor::from_vec(w, b, &Device::Cpu)?.to_dtype(pred.dtype())?;
                per_sample_mse(&pred, &target)?.mul(&w)?.mean_all()?
            }
            _ => diffusion_loss(&pred, &target)?,
        };

        let n_layers = self.ae.tap_resolutions().len();
        let (loss, loss_lpl, per_layer) = if phase == Phase::Posttrain && cfg.lpl.enabled && gated_fraction > 0.0 {
            // Gated-off samples are never decoded, so their recovery coefficient is irrelevant.
            let alpha_rec: Vec<f64> = alpha.iter().zip(&gate).map(|(&a, &g)| if g { a } else { 1.0 }).collect();
            let z0_hat = recover_x0(cfg.framework, &zt, &pred, &alpha_rec, &sigma)?;
            let terms = latent_perceptual_loss(self.ae, &cfg.lpl, &z0, &z0_hat, &gate, None)?;
            let lpl_value = terms.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            (total_loss(&loss_diff, &terms.loss.to_dtype(DType::F32)?, cfg.lpl.w_lpl)?, lpl_value, terms.per_layer)
        } else {
            (loss_diff.clone(), 0.0, vec![0.0; n_layers])
        };

        let loss_diff_v = loss_diff.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let loss_total = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_total.is_finite() || !loss_diff_v.is_finite() {
            return Err(LabError::numerical(format!(
                "non-finite loss at step {} (diff {loss_diff_v}, lpl {loss_lpl})",
                self.step + 1
            )));
        }
        let grads = loss.backward()?;
        let mut sq = 0.0;
        for (_, v) in self.params.vars() {
            if let Some(g) = grads.get(v) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        self.opt.step(&grads)?;
        let gamma = self.gamma(phase);
        ema_update(&mut self.ema, &self.params, gamma)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            phase,
            loss_diff: loss_diff_v,
            loss_lpl,
            loss_total,
            gated_fraction,
            per_layer_lpl: per_layer,
            grad_norm: sq.sqrt(),
            gamma_ema: gamma,
        })
    }

    /// Trains to the configured total, appending to `metrics.jsonl` and writing
    /// `checkpoint.ckpt` periodically and `final.ckpt` at the end when `out` is given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepMetrics>> {
        let total = self.cfg.trainer.total_steps();
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(open_metrics(&dir.join("metrics.jsonl"), self.step)?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.step < total {
            let m = self.train_step()?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&m)?)?;
                f.flush()?;
            }
            rows.push(m);
            let every = self.cfg.trainer.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step % every == 0 {
                    checkpoint::save(&dir.join("checkpoint.ckpt"), &self.checkpoint_tensors()?)?;
                }
            }
        }
        if self.ae.checksum()? != self.ae_checksum {
            return Err(LabError::numerical("autoencoder parameters changed during generator training"));
        }
        if let Some(dir) = out {
            checkpoint::save(&dir.join("final.ckpt"), &self.checkpoint_tensors()?)?;
        }
        Ok(rows)
    }
}

/// Opens the metrics log for appending, dropping rows past `resume_step`.
fn open_metrics(path: &Path, resume_step: u64) -> Result<fs::File> {
    let mut kept = Vec::new();
    if resume_step > 0 && path.exists() {
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            let row: StepMetrics = serde_json::from_str(&line)?;
            if row.step <= resume_step {
                kept.push(line);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

/// Result of [`train_generator`].
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: TensorMap,
}

pub fn train_generator(cfg: &RunConfig, dataset: &ImageSet, ae: &AutoencoderModel, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, dataset, ae)?;
    let metrics = trainer.run(out)?;
    Ok(TrainOutcome { metrics, checkpoint: trainer.checkpoint_tensors()? })
}
