//! Synthetic textured-shape corpus and image-folder ingestion.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::imageio;

/// Spatial downsampling factor of the autoencoder; resolutions must be multiples of it.
pub const AE_FACTOR: usize = 4;

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "stripes"];

const SUPERSAMPLE: usize = 4;
const EDGE_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub count: usize,
    pub resolution: usize,
    pub classes: usize,
    /// Cycles per image, `[low, high]`.
    pub texture_freq_range: [f64; 2],
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { count: 2048, resolution: 64, classes: 4, texture_freq_range: [8.0, 24.0], texture_amplitude: 0.35, seed: 0 }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(LabError::config("data spec: count must be positive"));
        }
        if self.resolution == 0 || self.resolution % AE_FACTOR != 0 {
            return Err(LabError::config(format!(
                "data spec: resolution {} is not a positive multiple of {AE_FACTOR}",
                self.resolution
            )));
        }
        if self.classes == 0 || self.classes > SHAPE_NAMES.len() {
            return Err(LabError::config(format!("data spec: classes must be in 1..={}", SHAPE_NAMES.len())));
        }
        let [lo, hi] = self.texture_freq_range;
        if !(0.0 <= lo && lo <= hi && hi <= self.resolution as f64 / 2.0) {
            return Err(LabError::config(format!(
                "data spec: texture_freq_range [{lo}, {hi}] must lie within [0, Nyquist = {}]",
                self.resolution / 2
            )));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return Err(LabError::config("data spec: texture_amplitude must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Square RGB images in `[-1, 1]`, stored HWC and concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pixels: Vec<f32>,
    pub labels: Vec<u32>,
    pub resolution: usize,
    pub seed: u64,
}

impl ImageSet {
    pub fn new(pixels: Vec<f32>, labels: Vec<u32>, resolution: usize, seed: u64) -> Result<Self> {
        if pixels.len() != labels.len() * resolution * resolution * 3 {
            return Err(LabError::shape(format!(
                "{} pixel values for {} images at {resolution}px",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { pixels, labels, resolution, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.resolution * self.resolution * 3
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { pixels, labels, resolution: self.resolution, seed: self.seed }
    }

    /// `(B, 3, H, W)` tensor for the given images.
    pub fn batch_tensor(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let (r, n) = (self.resolution, self.image_len());
        let mut buf = vec![0f32; indices.len() * n];
        for (b, &i) in indices.iter().enumerate() {
            let src = self.image(i);
            let dst = &mut buf[b * n..(b + 1) * n];
            for p in 0..r * r {
                for c in 0..3 {
                    dst[c * r * r + p] = src[p * 3 + c];
                }
            }
        }
        Ok(Tensor::from_vec(buf, (indices.len(), 3, r, r), device)?)
    }

    /// Inverse of [`batch_tensor`](Self::batch_tensor).
    pub fn from_tensor(images: &Tensor, labels: Vec<u32>) -> Result<Self> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || h != w || b != labels.len() {
            return Err(LabError::shape(format!("expected (B, 3, R, R) with B = {}, got {:?}", labels.len(), images.dims())));
        }
        let flat: Vec<f32> = images.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        let n = h * w * 3;
        let mut pixels = vec![0f32; b * n];
        for i in 0..b {
            for ch in 0..3 {
                for p in 0..h * w {
                    pixels[i * n + p * 3 + ch] = flat[i * n + ch * h * w + p];
                }
            }
        }
        Self::new(pixels, labels, h, 0)
    }

    /// Writes `img_XXXXX.png` files plus `manifest.json` (labels and, if given, the spec).
    pub fn save_dir(&self, dir: &Path, spec: Option<&DataSpec>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let r = self.resolution;
        (0..self.len()).into_par_iter().try_for_each(|i| {
            imageio::save_rgb(self.image(i), r, r, &dir.join(format!("img_{i:05}.png")))
        })?;
        let manifest = DatasetManifest { resolution: r, labels: self.labels.clone(), spec: spec.cloned() };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a directory written by [`save_dir`](Self::save_dir), or any image folder.
    pub fn load_dir(dir: &Path, resolution: usize) -> Result<Self> {
        let mut set = load_image_folder(dir, resolution)?;
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
            if m.labels.len() == set.len() {
                set.labels = m.labels;
            }
            if let Some(spec) = m.spec {
                set.seed = spec.seed;
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub labels: Vec<u32>,
    pub spec: Option<DataSpec>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { r: f64 },
    Square { half: f64, rot: f64 },
    Triangle { r: f64, rot: f64 },
    Stripes { half: f64, rot: f64, bars: usize },
}

impl Shape {
    /// Point-in-shape test in coordinates relative to the shape centre.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        let rotate = |rot: f64| {
            let (s, c) = rot.sin_cos();
            (c * dx + s * dy, -s * dx + c * dy)
        };
        match *self {
            Shape::Circle { r } => dx * dx + dy * dy <= r * r,
            Shape::Square { half, rot } => {
                let (u, v) = rotate(rot);
                u.abs() <= half && v.abs() <= half
            }
            Shape::Triangle { r, rot } => {
                let (u, v) = rotate(rot);
                // Equilateral triangle with circumradius r: three half-planes.
                (0..3).all(|k| {
                    let a = PI / 2.0 + k as f64 * TAU / 3.0 + PI;
                    u * a.cos() + v * a.sin() <= r / 2.0
                })
            }
            Shape::Stripes { half, rot, bars } => {
                let (u, v) = rotate(rot);
                if u.abs() > half || v.abs() > half {
                    return false;
                }
                let band = ((u + half) / (2.0 * half) * bars as f64).floor() as i64;
                band % 2 == 0
            }
        }
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Shape coverage per pixel: membership sampled on a `SUPERSAMPLE`x finer grid, then
/// downsampled with a Gaussian of `EDGE_SIGMA` pixels so edges carry little power
/// above a quarter of Nyquist.
fn coverage_map(shape: &Shape, cx: f64, cy: f64, res: usize) -> Vec<f64> {
    let s = SUPERSAMPLE;
    let sigma = EDGE_SIGMA * s as f64;
    let rad = (3.0 * sigma).ceil() as usize;
    let ext = res * s + 2 * rad;
    let sub = |i: usize| (i as f64 - rad as f64 + 0.5) / s as f64;
    let grid: Vec<f64> = (0..ext * ext).map(|k| f64::from(u8::from(shape.contains(sub(k % ext) - cx, sub(k / ext) - cy)))).collect();
    // Taps for output pixel p cover subsamples p*s .. p*s + s + 2*rad in extended coordinates.
    let taps: Vec<f64> = (0..s + 2 * rad)
        .map(|i| {
            let d = i as f64 + 0.5 - (rad as f64 + s as f64 / 2.0);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    let mut rows = vec![0.0; ext * res];
    for y in 0..ext {
        for x in 0..res {
            rows[y * res + x] = taps.iter().enumerate().map(|(i, w)| w * grid[y * ext + x * s + i]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            out[y * res + x] = taps.iter().enumerate().map(|(i, w)| w * rows[(y * s + i) * res + x]).sum::<f64>() / norm;
        }
    }
    out
}

fn render(spec: &DataSpec, index: usize) -> (Vec<f32>, u32) {
    let mut rng = image_rng(spec.seed, index);
    let res = spec.resolution;
    let rf = res as f64;
    let label = rng.random_range(0..spec.classes) as u32;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    let grad: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let grad_dir = rng.random_range(0.0..TAU);
    let fill: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));

    let (cx, cy) = (rng.random_range(0.35..0.65) * rf, rng.random_range(0.35..0.65) * rf);
    let size = rng.random_range(0.18..0.3) * rf;
    let rot = rng.random_range(0.0..TAU);
    let shape = match label {
        0 => Shape::Circle { r: size },
        1 => Shape::Square { half: size * 0.85, rot },
        2 => Shape::Triangle { r: size * 1.2, rot },
        _ => Shape::Stripes { half: size, rot, bars: 5 },
    };

    let [lo, hi] = spec.texture_freq_range;
    let freq = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let tex_dir = rng.random_range(0.0..TAU);
    let tex_phase = rng.random_range(0.0..TAU);
    let (tdx, tdy) = (tex_dir.cos(), tex_dir.sin());
    let (gdx, gdy) = (grad_dir.cos(), grad_dir.sin());

    let coverage = coverage_map(&shape, cx, cy, res);
    let mut pixels = vec![0f32; res * res * 3];
    for y in 0..res {
        for x in 0..res {
            let cover = coverage[y * res + x];
            let (u, v) = ((x as f64 + 0.5) / rf - 0.5, (y as f64 + 0.5) / rf - 0.5);
            let ramp = u * gdx + v * gdy;
            let tex = spec.texture_amplitude * (TAU * freq * (u * tdx + v * tdy) + tex_phase).sin();
            for c in 0..3 {
                let bg = base[c] + grad[c] * ramp;
                let fg = fill[c] + tex;
                let val = bg * (1.0 - cover) + fg * cover;
                pixels[(y * res + x) * 3 + c] = val.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    (pixels, label)
}

/// Deterministic textured-shape corpus; image `i` depends only on `(seed, i)`.
pub fn generate_textured_dataset(spec: &DataSpec) -> Result<ImageSet> {
    spec.validate()?;
    let rendered: Vec<(Vec<f32>, u32)> = (0..spec.count).into_par_iter().map(|i| render(spec, i)).collect();
    let mut pixels = Vec::with_capacity(spec.count * spec.resolution * spec.resolution * 3);
    let mut labels = Vec::with_capacity(spec.count);
    for (p, l) in rendered {
        pixels.extend(p);
        labels.push(l);
    }
    ImageSet::new(pixels, labels, spec.resolution, spec.seed)
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "gif", "webp"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LabError::Ingestion { path: dir.to_path_buf(), reason: e.to_string() })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Centre-cropped, resized to `resolution`, rescaled to `[-1, 1]`; labels all 0.
pub fn load_image_folder(dir: &Path, resolution: usize) -> Result<ImageSet> {
    if resolution == 0 {
        return Err(LabError::config("resolution must be positive"));
    }
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(LabError::Ingestion { path: dir.to_path_buf(), reason: "no images found".into() });
    }
    let decoded: Vec<Vec<f32>> = files
        .par_iter()
        .map(|path| {
            let img = image::open(path)
                .map_err(|e| LabError::Ingestion { path: path.clone(), reason: e.to_string() })?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let side = w.min(h);
            let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
            let resized = if side as usize == resolution {
                cropped
            } else {
                image::imageops::resize(&cropped, resolution as u32, resolution as u32, image::imageops::FilterType::Triangle)
            };
            Ok(resized.into_raw().into_iter().map(imageio::from_u8).collect())
        })
        .collect::<Result<_>>()?;
    let labels = vec![0; decoded.len()];
    ImageSet::new(decoded.concat(), labels, resolution, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_range() {
        let spec = DataSpec { count: 128, ..Default::default() };
        let set = generate_textured_dataset(&spec).unwrap();
        assert_eq!(set.len(), 128);
        assert_eq!(set.image(0).len(), 64 * 64 * 3);
        assert!(set.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(set.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn deterministic() {
        let spec = DataSpec { count: 400, classes: 4, seed: 7, ..Default::default() };
        let a = generate_textured_dataset(&spec).unwrap();
        let b = generate_textured_dataset(&spec).unwrap();
        assert_eq!(a, b);
        // Image i does not depend on how many images are generated.
        let small = generate_textured_dataset(&DataSpec { count: 3, ..spec }).unwrap();
        assert_eq!(small.image(2), a.image(2));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_textured_dataset(&DataSpec { count: 0, ..Default::default() }).is_err());
        assert!(generate_textured_dataset(&DataSpec { resolution: 62, ..Default::default() }).is_err());
        assert!(generate_textured_dataset(&DataSpec { texture_freq_range: [4.0, 40.0], ..Default::default() }).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let set = generate_textured_dataset(&DataSpec { count: 3, resolution: 16, texture_freq_range: [2.0, 6.0], ..Default::default() }).unwrap();
        let t = set.batch_tensor(&[0, 1, 2], &Device::Cpu).unwrap();
        let back = ImageSet::from_tensor(&t, set.labels.clone()).unwrap();
        assert_eq!(back.pixels(), set.pixels());
    }
}
