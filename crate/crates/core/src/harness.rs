//! Experiment commands: each reads a [`RunConfig`], writes artifacts into an
//! output directory and records a `manifest.json` with the resolved config,
//! content hashes of its inputs and wall-clock timings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{train_autoencoder, AutoencoderModel};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::eval::spectrum::{radial_power_spectrum, spectrum_difference, BandErrors, SpectrumProfile};
use crate::eval::{embed_for_metrics, frechet_distance, prdc, Prdc};
use crate::imageio;
use crate::probes::{self, Interp, ResampleSpace};
use crate::samplers::{sample, NetworkDenoiser, SampleRequest};
use crate::toydata::{generate_textured_dataset, ImageSet};
use crate::trainer::{StepMetrics, Trainer};

pub const THREADS_ENV: &str = "LPL_LAB_THREADS";

/// Sizes the global worker pool from `LPL_LAB_THREADS` (0 means one thread).
pub fn configure_threads() -> Result<usize> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(rayon::current_num_threads());
    };
    let n: usize = v.trim().parse().map_err(|_| LabError::config(format!("{THREADS_ENV}={v:?} is not a count")))?;
    let n = n.max(1);
    // A pool built earlier in the same process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

/// Git-style object hash: SHA-256 of `"blob <len>\0" + content`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, base, out)?;
        } else {
            let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// Blob hash of a file, or of the sorted `"<hash> <relative path>"` listing of a directory.
pub fn content_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(LabError::MissingInput(path.display().to_string()));
    }
    if path.is_file() {
        return Ok(blob_hash(&fs::read(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    let mut listing = String::new();
    for (rel, p) in files {
        let _ = writeln!(listing, "{} {rel}", blob_hash(&fs::read(&p)?));
    }
    Ok(blob_hash(listing.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, InputRecord>,
    pub timings_s: BTreeMap<String, f64>,
    pub threads: usize,
    pub summary: serde_json::Value,
}

/// Bookkeeping for one command invocation.
pub struct Run {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    pub fn start(command: &str, cfg: &RunConfig, out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config: cfg.clone(),
                inputs: BTreeMap::new(),
                timings_s: BTreeMap::new(),
                threads: rayon::current_num_threads(),
                summary: serde_json::Value::Null,
            },
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = content_hash(path)?;
        self.manifest.inputs.insert(name.into(), InputRecord { path: path.display().to_string(), hash });
        Ok(())
    }

    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.manifest.timings_s.insert(label.into(), t.elapsed().as_secs_f64());
        Ok(out)
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<RunManifest> {
        self.manifest.timings_s.insert("total".into(), self.started.elapsed().as_secs_f64());
        self.manifest.summary = summary;
        fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

fn require<'a>(p: Option<&'a Path>, flag: &str) -> Result<&'a Path> {
    p.ok_or_else(|| LabError::MissingInput(format!("{flag} is required for this command")))
}

/// Loads images from a directory, descending into an `images/` subdirectory if present.
pub fn load_images(dir: &Path, resolution: usize) -> Result<ImageSet> {
    if !dir.exists() {
        return Err(LabError::MissingInput(format!("image directory {}", dir.display())));
    }
    let sub = dir.join("images");
    ImageSet::load_dir(if sub.is_dir() { &sub } else { dir }, resolution)
}

/// `ae.ckpt` inside a directory, or the file itself.
pub fn load_autoencoder(path: &Path) -> Result<AutoencoderModel> {
    let file = if path.is_dir() { path.join("ae.ckpt") } else { path.to_path_buf() };
    AutoencoderModel::from_tensors(&checkpoint::load(&file)?, DType::F32)
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("final.ckpt")
    } else {
        path.to_path_buf()
    }
}

fn dataset(run: &mut Run, cfg: &RunConfig, data: Option<&Path>) -> Result<ImageSet> {
    match data {
        Some(dir) => {
            run.input("data", dir)?;
            run.timed("load_data", || load_images(dir, cfg.data.resolution))
        }
        None => run.timed("generate_data", || generate_textured_dataset(&cfg.data)),
    }
}

fn preview(set: &ImageSet, n: usize, path: &Path) -> Result<()> {
    let imgs: Vec<&[f32]> = (0..set.len().min(n)).map(|i| set.image(i)).collect();
    imageio::save_grid(&imgs, set.resolution, 8, path)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut run = Run::start("gen-data", cfg, out)?;
    let set = run.timed("generate", || generate_textured_dataset(&cfg.data))?;
    run.timed("write", || set.save_dir(&out.join("images"), Some(&cfg.data)))?;
    preview(&set, 32, &out.join("preview.png"))?;
    run.finish(serde_json::json!({ "images": set.len() }))
}

pub fn train_ae(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let mut run = Run::start("train-ae", cfg, out)?;
    let set = dataset(&mut run, cfg, data)?;
    let (ae, report) = run.timed("train", || train_autoencoder(&set, &cfg.ae))?;
    checkpoint::save(&out.join("ae.ckpt"), &ae.to_tensors()?)?;
    fs::write(out.join("ae_report.json"), serde_json::to_string_pretty(&report)?)?;
    let n = set.len().min(8);
    let head = set.subset(&(0..n).collect::<Vec<_>>());
    let rec = ae.decode_set(&ae.encode_set(&head, 8)?, head.labels.clone(), 8)?;
    let imgs: Vec<&[f32]> = (0..n).map(|i| head.image(i)).chain((0..n).map(|i| rec.image(i))).collect();
    imageio::save_grid(&imgs, set.resolution, n, &out.join("reconstructions.png"))?;
    run.finish(serde_json::json!({
        "train_mse": report.train_mse,
        "holdout_mse": report.holdout_mse,
        "latent_scale": ae.latent_scale(),
    }))
}

pub fn train_gen(cfg: &RunConfig, data: Option<&Path>, ae_path: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let ae_path = require(ae_path, "--ae")?;
    let mut run = Run::start("train-gen", cfg, out)?;
    run.input("ae", ae_path)?;
    let ae = load_autoencoder(ae_path)?;
    let set = dataset(&mut run, cfg, data)?;
    let mut trainer = match resume {
        Some(p) => {
            let file = if p.is_dir() { p.join("checkpoint.ckpt") } else { p.to_path_buf() };
            run.input("resume", &file)?;
            Trainer::resume(cfg, &set, &ae, &checkpoint::load(&file)?)?
        }
        None => Trainer::new(cfg, &set, &ae)?,
    };
    let rows = run.timed("train", || trainer.run(Some(out)))?;
    run.finish(serde_json::json!({ "steps": trainer.step_count(), "last": rows.last() }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesManifest {
    pub seed: u64,
    pub guidance: f64,
    pub steps: usize,
    pub count: usize,
    pub use_ema: bool,
    pub checkpoint: String,
    pub checkpoint_hash: String,
}

/// Samples latents from a generator checkpoint and decodes them.
pub fn generate_samples(cfg: &RunConfig, ckpt: &TensorMap, ae: &AutoencoderModel) -> Result<(Tensor, ImageSet)> {
    let prefix = if cfg.sampler.use_ema { "ema." } else { "online." };
    let weights = checkpoint::strip_prefix(ckpt, prefix);
    let model = NetworkDenoiser::from_tensors(&weights, cfg.denoiser, cfg.framework)?;
    let req = SampleRequest::from_config(&cfg.sampler, cfg.data.classes, ae.latent_resolution());
    let latents = sample(&model, cfg.framework, &cfg.schedule()?, &req)?;
    let images = ae.decode_set(&latents, req.labels.clone(), cfg.sampler.batch_size)?;
    Ok((latents, images))
}

use crate::nn::TensorMap;

fn write_samples(out: &Path, latents: &Tensor, images: &ImageSet) -> Result<()> {
    images.save_dir(&out.join("images"), None)?;
    preview(images, 64, &out.join("grid.png"))?;
    let mut map = TensorMap::new();
    map.insert("latents".into(), latents.clone());
    let all: Vec<usize> = (0..images.len()).collect();
    map.insert("images".into(), images.batch_tensor(&all, &Device::Cpu)?);
    let labels: Vec<f64> = images.labels.iter().map(|&l| l as f64).collect();
    map.insert("labels".into(), Tensor::from_vec(labels, images.len(), &Device::Cpu)?);
    checkpoint::save(&out.join("samples.ckpt"), &map)
}

pub fn sample_cmd(cfg: &RunConfig, ckpt_path: Option<&Path>, ae_path: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let ckpt_path = checkpoint_file(require(ckpt_path, "--checkpoint")?);
    let ae_path = require(ae_path, "--ae")?;
    let mut run = Run::start("sample", cfg, out)?;
    run.input("checkpoint", &ckpt_path)?;
    run.input("ae", ae_path)?;
    let ae = load_autoencoder(ae_path)?;
    let ckpt = checkpoint::load(&ckpt_path)?;
    let (latents, images) = run.timed("sample", || generate_samples(cfg, &ckpt, &ae))?;
    write_samples(out, &latents, &images)?;
    let sm = SamplesManifest {
        seed: cfg.sampler.seed,
        guidance: cfg.sampler.guidance,
        steps: cfg.sampler.steps,
        count: images.len(),
        use_ema: cfg.sampler.use_ema,
        checkpoint: ckpt_path.display().to_string(),
        checkpoint_hash: run.manifest.inputs["checkpoint"].hash.clone(),
    };
    fs::write(out.join("samples_manifest.json"), serde_json::to_string_pretty(&sm)?)?;
    run.finish(serde_json::to_value(&sm)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_real: usize,
    pub n_fake: usize,
    pub frechet: f64,
    pub prdc: Prdc,
    pub band_errors: BandErrors,
    pub config: RunConfig,
}

fn write_spectra(out: &Path, real: &SpectrumProfile, fake: &SpectrumProfile) -> Result<BandErrors> {
    fs::write(out.join("spectrum_real.csv"), real.to_csv())?;
    fs::write(out.join("spectrum_fake.csv"), fake.to_csv())?;
    let diff = spectrum_difference(fake, real)?;
    let shifted = SpectrumProfile { log_power: diff.grid.clone(), ..fake.clone() }.shifted_grid();
    imageio::save_heatmap(&shifted, fake.h, fake.w, &out.join("spectrum_difference.png"))?;
    Ok(diff.band_errors)
}

fn spectrum_of(set: &ImageSet) -> Result<SpectrumProfile> {
    radial_power_spectrum((0..set.len()).map(|i| set.image(i)), set.resolution)
}

/// Metrics of `fake` against `real` in the autoencoder feature space plus spectra.
pub fn evaluate(cfg: &RunConfig, real: &ImageSet, fake: &ImageSet, ae: &AutoencoderModel, out: &Path) -> Result<EvalReport> {
    let b = cfg.eval.batch_size;
    let fr = embed_for_metrics(real, ae, b, "real")?;
    let ff = embed_for_metrics(fake, ae, b, "generated")?;
    let frechet = frechet_distance(&fr, &ff)?;
    let prdc = prdc(&fr, &ff, cfg.eval.prdc_k)?;
    let band_errors = write_spectra(out, &spectrum_of(real)?, &spectrum_of(fake)?)?;
    let report = EvalReport { n_real: real.len(), n_fake: fake.len(), frechet, prdc, band_errors, config: cfg.clone() };
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn eval_cmd(cfg: &RunConfig, real: Option<&Path>, fake: Option<&Path>, ae_path: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let (real, fake, ae_path) = (require(real, "--real")?, require(fake, "--fake")?, require(ae_path, "--ae")?);
    let mut run = Run::start("eval", cfg, out)?;
    run.input("real", real)?;
    run.input("fake", fake)?;
    run.input("ae", ae_path)?;
    let ae = load_autoencoder(ae_path)?;
    let r = load_images(real, ae.resolution())?;
    let f = load_images(fake, ae.resolution())?;
    let report = run.timed("evaluate", || evaluate(cfg, &r, &f, &ae, out))?;
    run.finish(serde_json::to_value(&report)?)
}

pub fn spectrum_cmd(cfg: &RunConfig, real: Option<&Path>, fake: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let real = require(real, "--real")?;
    let mut run = Run::start("spectrum", cfg, out)?;
    run.input("real", real)?;
    let r = spectrum_of(&load_images(real, cfg.data.resolution)?)?;
    let summary = match fake {
        Some(f) => {
            run.input("fake", f)?;
            let bands = write_spectra(out, &r, &spectrum_of(&load_images(f, cfg.data.resolution)?)?)?;
            serde_json::to_value(bands)?
        }
        None => {
            fs::write(out.join("spectrum_real.csv"), r.to_csv())?;
            serde_json::Value::Null
        }
    };
    fs::write(out.join("spectrum_report.json"), serde_json::to_string_pretty(&summary)?)?;
    run.finish(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub interp: Vec<(ResampleSpace, Vec<probes::InterpRow>)>,
    pub perturbation_full_norm: f64,
    pub perturbation_center_norm: f64,
    pub perturbation_scale: f64,
    pub linearization: Vec<probes::LinearizationRow>,
}

pub fn probe_cmd(cfg: &RunConfig, ae_path: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let ae_path = require(ae_path, "--ae")?;
    let mut run = Run::start("probe", cfg, out)?;
    run.input("ae", ae_path)?;
    let ae = load_autoencoder(ae_path)?;
    let set = dataset(&mut run, cfg, data)?;
    let set = set.subset(&(0..set.len().min(8)).collect::<Vec<_>>());
    let methods = [Interp::Nearest, Interp::Bilinear, Interp::Bicubic];
    let mut interp = Vec::new();
    let mut csv = String::from("space,image,method,latent_mse,pixel_mse\n");
    for space in [ResampleSpace::Pixel, ResampleSpace::Latent] {
        let res = run.timed(&format!("interp_{space:?}").to_lowercase(), || {
            probes::interp_roundtrip_probe(&ae, &set, 2, &methods, space)
        })?;
        for r in &res.rows {
            let _ = writeln!(csv, "{},{},{},{},{}", format!("{space:?}").to_lowercase(), r.image, format!("{:?}", r.method).to_lowercase(), r.latent_mse, r.pixel_mse);
        }
        for (m, rec) in &res.reconstructions {
            preview(rec, 8, &out.join(format!("interp_{}_{}.png", format!("{space:?}").to_lowercase(), format!("{m:?}").to_lowercase())))?;
        }
        interp.push((space, res.rows));
    }
    fs::write(out.join("interp_table.csv"), csv)?;

    let r = ae.latent_resolution();
    let full = vec![true; r * r];
    let inside = |c: usize| c >= r / 4 && c < r - r / 4;
    let center: Vec<bool> = (0..r * r).map(|i| inside(i / r) && inside(i % r)).collect();
    let pf = probes::perturbation_probe(&ae, set.image(0), &full, None, cfg.seed)?;
    let pc = probes::perturbation_probe(&ae, set.image(0), &center, None, cfg.seed)?;
    let res = ae.resolution();
    imageio::save_magnitude(&pf.error_map, res, res, &out.join("perturb_full.png"))?;
    imageio::save_magnitude(&pc.error_map, res, res, &out.join("perturb_center.png"))?;

    let z = ae.encode(&set.batch_tensor(&[0], &Device::Cpu)?)?;
    let linearization = probes::linearization_report(&ae, &z, &[1e-3, 1e-2, 1e-1, 1.0], cfg.seed)?;
    let report = ProbeReport {
        interp,
        perturbation_full_norm: pf.error_norm,
        perturbation_center_norm: pc.error_norm,
        perturbation_scale: pf.scale,
        linearization,
    };
    fs::write(out.join("probe_report.json"), serde_json::to_string_pretty(&report)?)?;
    run.finish(serde_json::json!({
        "perturbation_full_norm": report.perturbation_full_norm,
        "perturbation_center_norm": report.perturbation_center_norm,
    }))
}

pub const THEORY_INSTANCES: usize = 100;

pub fn verify_theory(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut run = Run::start("verify-theory", cfg, out)?;
    let report = run.timed("sweep", || probes::projection_sweep(THEORY_INSTANCES, cfg.seed))?;
    fs::write(out.join("theory_report.json"), serde_json::to_string_pretty(&report)?)?;
    run.finish(serde_json::json!({
        "instances": report.instances,
        "identity_passes": report.identity_passes,
        "bound_passes": report.bound_passes,
        "max_identity_error": report.max_identity_error,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub dir: String,
    pub final_loss_diff: f64,
    pub final_loss_lpl: f64,
    pub frechet: f64,
    pub high_band_error: f64,
}

fn value_label(v: f64) -> String {
    let s = format!("{v}");
    s.replace('-', "m")
}

/// Trains, samples and evaluates one run per value of `param`.
pub fn sweep(cfg: &RunConfig, param: &str, values: &[f64], data: Option<&Path>, ae_path: Option<&Path>, out: &Path) -> Result<RunManifest> {
    if values.is_empty() {
        return Err(LabError::config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_param(param, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let ae_path = require(ae_path, "--ae")?;
    let mut run = Run::start("sweep", cfg, out)?;
    run.input("ae", ae_path)?;
    let ae = load_autoencoder(ae_path)?;
    let set = dataset(&mut run, cfg, data)?;
    let mut rows = Vec::new();
    for (c, &v) in configs.iter().zip(values) {
        let name = format!("{param}_{}", value_label(v));
        let dir = out.join(&name);
        let mut sub = Run::start("train-gen", c, &dir)?;
        sub.input("ae", ae_path)?;
        let mut trainer = Trainer::new(c, &set, &ae)?;
        let metrics: Vec<StepMetrics> = sub.timed("train", || trainer.run(Some(&dir)))?;
        let ckpt = trainer.checkpoint_tensors()?;
        let (latents, images) = sub.timed("sample", || generate_samples(c, &ckpt, &ae))?;
        write_samples(&dir.join("samples"), &latents, &images)?;
        let report = sub.timed("evaluate", || evaluate(c, &set, &images, &ae, &dir))?;
        let last = metrics.last();
        let row = SweepRow {
            value: v,
            dir: name,
            final_loss_diff: last.map_or(f64::NAN, |m| m.loss_diff),
            final_loss_lpl: last.map_or(f64::NAN, |m| m.loss_lpl),
            frechet: report.frechet,
            high_band_error: report.band_errors.high,
        };
        sub.finish(serde_json::to_value(&row)?)?;
        rows.push(row);
    }
    let mut csv = format!("{param},dir,final_loss_diff,final_loss_lpl,frechet,high_band_error\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.value, r.dir, r.final_loss_diff, r.final_loss_lpl, r.frechet, r.high_band_error);
    }
    fs::write(out.join("summary.csv"), csv)?;
    run.finish(serde_json::json!({ "param": param, "runs": rows.len() }))
}

/// Reads the metrics log written by a training run.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    fs::read_to_string(path)?.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

