//! Verification probes for linear-decoder theory and for decoder behaviour
//! under latent resampling and perturbation.

use candle_core::{DType, Device, Tensor};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderModel, LATENT_CHANNELS};
use crate::diffusion::to_f64_vec;
use crate::error::{LabError, Result};
use crate::toydata::ImageSet;

/// `KL(N(mu1, s1) || N(mu2, s2))` via Cholesky factors.
pub fn gaussian_kl(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let k = mu1.len();
    if mu2.len() != k || s1.shape() != (k, k) || s2.shape() != (k, k) {
        return Err(LabError::shape("gaussian_kl: dimension mismatch"));
    }
    let c1 = Cholesky::new(s1.clone()).ok_or_else(|| LabError::numerical("gaussian_kl: first covariance not PD"))?;
    let c2 = Cholesky::new(s2.clone()).ok_or_else(|| LabError::numerical("gaussian_kl: second covariance not PD"))?;
    let logdet = |c: &Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = c2.solve(s1).trace();
    let d = mu2 - mu1;
    let mahal = d.dot(&c2.solve(&d));
    Ok(0.5 * (trace + mahal - k as f64 + logdet(&c2) - logdet(&c1)))
}

/// Linear decoder `x = A z` with `A` of shape `(image_dim, latent_dim)` and full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoderModel {
    pub a: DMatrix<f64>,
}

impl LinearDecoderModel {
    /// Standard-normal entries; resampled until `A A^T` is well conditioned.
    pub fn random(image_dim: usize, latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if image_dim == 0 || image_dim > latent_dim {
            return Err(LabError::config(format!(
                "linear decoder needs 0 < image_dim <= latent_dim, got {image_dim} x {latent_dim}"
            )));
        }
        for _ in 0..100 {
            let a: DMatrix<f64> = DMatrix::from_fn(image_dim, latent_dim, |_, _| rng.sample(StandardNormal));
            let eig = SymmetricEigen::new(&a * a.transpose()).eigenvalues;
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            if lo > 0.0 && hi / lo < 1e8 {
                return Ok(Self { a });
            }
        }
        Err(LabError::numerical("could not draw a full-row-rank decoder"))
    }

    pub fn gram(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }
}

/// Result of checking the projection-penalty identity on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub image_dim: usize,
    pub latent_dim: usize,
    pub kl: f64,
    pub quadratic: f64,
    pub constant: f64,
    pub identity_error: f64,
    pub bound: f64,
    pub identity_holds: bool,
    pub bound_holds: bool,
}

pub const IDENTITY_TOL: f64 = 1e-8;
pub const BOUND_SLACK: f64 = 1e-10;

/// Mean-independent part of the KL between `N(., b A A^T)` and `N(., s A A^T)` in `k` dimensions.
pub fn projection_constant(k: usize, beta_tilde: f64, sigma2: f64) -> f64 {
    0.5 * k as f64 * (beta_tilde / sigma2 - 1.0 + (sigma2 / beta_tilde).ln())
}

/// Compares the generic KL of the two image-space Gaussians with the
/// quadratic form in `A (mu1 - mu2)` plus constant, and checks the
/// `lambda_max((A A^T)^-1)` bound.
pub fn verify_projection_penalty(
    decoder: &LinearDecoderModel,
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
    beta_tilde: f64,
    sigma2: f64,
) -> Result<ProjectionReport> {
    if !(beta_tilde > 0.0 && sigma2 > 0.0) {
        return Err(LabError::config("beta_tilde and sigma^2 must be positive"));
    }
    let a = &decoder.a;
    let (k, d) = a.shape();
    if mu1.len() != d || mu2.len() != d {
        return Err(LabError::shape(format!("latent means must have {d} entries")));
    }
    let gram = decoder.gram();
    let kl = gaussian_kl(&(a * mu1), &(&gram * beta_tilde), &(a * mu2), &(&gram * sigma2))?;
    let diff = a * (mu1 - mu2);
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| LabError::numerical("A A^T is rank deficient"))?;
    let quadratic = 0.5 / sigma2 * diff.dot(&chol.solve(&diff));
    let constant = projection_constant(k, beta_tilde, sigma2);
    let lambda_max_inv = 1.0 / SymmetricEigen::new(gram).eigenvalues.min();
    let bound = 0.5 / sigma2 * lambda_max_inv * diff.norm_squared();
    let identity_error = (kl - quadratic - constant).abs();
    Ok(ProjectionReport {
        image_dim: k,
        latent_dim: d,
        kl,
        quadratic,
        constant,
        identity_error,
        bound,
        identity_holds: identity_error <= IDENTITY_TOL * kl.abs().max(1.0),
        bound_holds: quadratic <= bound + BOUND_SLACK * bound.max(1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub instances: usize,
    pub identity_passes: usize,
    pub bound_passes: usize,
    pub max_identity_error: f64,
    pub reports: Vec<ProjectionReport>,
}

/// Random instances with `image_dim <= 32` and `latent_dim <= 64`.
pub fn projection_sweep(instances: usize, seed: u64) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(instances);
    for _ in 0..instances {
        let k = rng.random_range(1..=32);
        let d = rng.random_range(k..=64);
        let dec = LinearDecoderModel::random(k, d, &mut rng)?;
        let mu1 = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let mu2 = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let beta_tilde = rng.random_range(0.05..1.0);
        let sigma2 = rng.random_range(0.05..1.0);
        reports.push(verify_projection_penalty(&dec, &mu1, &mu2, beta_tilde, sigma2)?);
    }
    Ok(TheoryReport {
        instances,
        identity_passes: reports.iter().filter(|r| r.identity_holds).count(),
        bound_passes: reports.iter().filter(|r| r.bound_holds).count(),
        max_identity_error: reports.iter().map(|r| r.identity_error).fold(0.0, f64::max),
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for Interp {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(LabError::config(format!("unknown interpolation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleSpace {
    Pixel,
    Latent,
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let w0 = ((A * (t + 1.0) - 5.0 * A) * (t + 1.0) + 8.0 * A) * (t + 1.0) - 4.0 * A;
    let w1 = ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0;
    let u = 1.0 - t;
    let w2 = ((A + 2.0) * u - (A + 3.0)) * u * u + 1.0;
    [w0, w1, w2, 1.0 - w0 - w1 - w2]
}

/// Interpolation taps `(index, weight)` for one output position, half-pixel centres.
fn taps(dst: usize, n_in: usize, n_out: usize, method: Interp) -> Vec<(usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    match method {
        Interp::Nearest => vec![(((dst as f64 * scale).floor() as usize).min(n_in - 1), 1.0)],
        Interp::Bilinear => {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            vec![(i0, 1.0 - l), (i1, l)]
        }
        Interp::Bicubic => {
            let src = (dst as f64 + 0.5) * scale - 0.5;
            let i = src.floor();
            let w = cubic_weights(src - i);
            (0..4)
                .map(|j| {
                    let idx = (i as isize + j as isize - 1).clamp(0, n_in as isize - 1) as usize;
                    (idx, w[j])
                })
                .collect()
        }
    }
}

/// Resizes `planes` stacked `h x w` grids to `oh x ow`.
pub fn resize(data: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize), method: Interp) -> Vec<f64> {
    let tx: Vec<_> = (0..ow).map(|x| taps(x, w, ow, method)).collect();
    let ty: Vec<_> = (0..oh).map(|y| taps(y, h, oh, method)).collect();
    let mut out = vec![0.0; planes * oh * ow];
    let mut rows = vec![0.0; h * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (x, t) in tx.iter().enumerate() {
                rows[y * ow + x] = t.iter().map(|&(i, wt)| wt * src[y * w + i]).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, t) in ty.iter().enumerate() {
            for x in 0..ow {
                dst[y * ow + x] = t.iter().map(|&(i, wt)| wt * rows[i * ow + x]).sum();
            }
        }
    }
    out
}

fn down_up(t: &Tensor, s: usize, method: Interp) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if s == 1 {
        return Ok(t.clone());
    }
    let (dh, dw) = (h / s, w / s);
    let down = resize(&to_f64_vec(t)?, b * c, (h, w), (dh, dw), method);
    let up = resize(&down, b * c, (dh, dw), (h, w), method);
    Ok(Tensor::from_vec(up, (b, c, h, w), &Device::Cpu)?.to_dtype(t.dtype())?)
}

fn mse_rows(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let d = (a - b)?.sqr()?.flatten_from(1)?.mean(1)?;
    to_f64_vec(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpRow {
    pub image: usize,
    pub method: Interp,
    pub latent_mse: f64,
    pub pixel_mse: f64,
}

pub struct InterpResult {
    pub rows: Vec<InterpRow>,
    /// One reconstruction set per method, in input order.
    pub reconstructions: Vec<(Interp, ImageSet)>,
}

/// Downscales by `1/s` and upscales back in pixel or latent space, then
/// compares latents and decoded images against the unresampled path.
pub fn interp_roundtrip_probe(
    ae: &AutoencoderModel,
    images: &ImageSet,
    s: usize,
    methods: &[Interp],
    space: ResampleSpace,
) -> Result<InterpResult> {
    let grid = match space {
        ResampleSpace::Pixel => ae.resolution(),
        ResampleSpace::Latent => ae.latent_resolution(),
    };
    if s == 0 || grid % s != 0 {
        return Err(LabError::config(format!("scale factor {s} must divide the {grid}px grid")));
    }
    let x = images.batch_tensor(&(0..images.len()).collect::<Vec<_>>(), &Device::Cpu)?.to_dtype(ae.dtype())?;
    let z = ae.encode(&x)?;
    let reference = ae.decode(&z)?;
    let mut rows = Vec::new();
    let mut reconstructions = Vec::new();
    for &method in methods {
        let z2 = match space {
            ResampleSpace::Latent => down_up(&z, s, method)?,
            ResampleSpace::Pixel => ae.encode(&down_up(&x, s, method)?)?,
        };
        let rec = ae.decode(&z2)?;
        let lat = mse_rows(&z2, &z)?;
        let pix = mse_rows(&rec, &reference)?;
        for i in 0..images.len() {
            rows.push(InterpRow { image: i, method, latent_mse: lat[i], pixel_mse: pix[i] });
        }
        reconstructions.push((method, ImageSet::from_tensor(&rec, images.labels.clone())?));
    }
    Ok(InterpResult { rows, reconstructions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    /// Per-pixel absolute error averaged over colour channels, `H x W`.
    pub error_map: Vec<f64>,
    pub error_norm: f64,
    pub scale: f64,
}

/// Adds `N(0, scale)` noise to the latent cells where `region` is set
/// (default scale: half the latent variance) and measures the decoded change.
pub fn perturbation_probe(
    ae: &AutoencoderModel,
    image: &[f32],
    region: &[bool],
    scale: Option<f64>,
    seed: u64,
) -> Result<PerturbationResult> {
    let r = ae.latent_resolution();
    if region.len() != r * r {
        return Err(LabError::shape(format!("region mask of {} cells for a {r}x{r} latent", region.len())));
    }
    if !region.iter().any(|&m| m) {
        return Err(LabError::config("perturbation region is empty"));
    }
    let set = ImageSet::new(image.to_vec(), vec![0], ae.resolution(), 0)?;
    let z = ae.encode(&set.batch_tensor(&[0], &Device::Cpu)?.to_dtype(ae.dtype())?)?;
    let zv = to_f64_vec(&z)?;
    let mean = zv.iter().sum::<f64>() / zv.len() as f64;
    let var = zv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / zv.len() as f64;
    let scale = scale.unwrap_or(0.5 * var);
    if !(scale >= 0.0) {
        return Err(LabError::config("perturbation scale must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = scale.sqrt();
    let mut zp = zv.clone();
    for c in 0..LATENT_CHANNELS {
        for (cell, &m) in region.iter().enumerate() {
            let n: f64 = rng.sample(StandardNormal);
            if m {
                zp[c * r * r + cell] += std * n;
            }
        }
    }
    let zp = Tensor::from_vec(zp, z.dims(), &Device::Cpu)?.to_dtype(z.dtype())?;
    let diff = to_f64_vec(&(ae.decode(&zp)? - ae.decode(&z)?)?)?;
    let res = ae.resolution();
    let error_map: Vec<f64> =
        (0..res * res).map(|p| (0..3).map(|c| diff[c * res * res + p].abs()).sum::<f64>() / 3.0).collect();
    let error_norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(PerturbationResult { error_map, error_norm, scale })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationRow {
    pub magnitude: f64,
    pub residual: f64,
    pub relative: f64,
}

/// `||decode(z + d) - decode(z) - J d||` for random directions `d` of growing norm,
/// with `J d` from a central difference. Descriptive only.
pub fn linearization_report(ae: &AutoencoderModel, latent: &Tensor, magnitudes: &[f64], seed: u64) -> Result<Vec<LinearizationRow>> {
    let ae64 = ae.to_dtype(DType::F64)?;
    let z = latent.to_dtype(DType::F64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = z.elem_count();
    let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit = (Tensor::from_vec(dir, z.dims(), &Device::Cpu)? / norm)?;
    let base = ae64.decode(&z)?;
    let h = 1e-4;
    let jd = ((ae64.decode(&(&z + (&unit * h)?)?)? - ae64.decode(&(&z - (&unit * h)?)?)?)? / (2.0 * h))?;
    magnitudes
        .iter()
        .map(|&m| {
            let delta = (ae64.decode(&(&z + (&unit * m)?)?)? - &base)?;
            let resid = (&delta - (&jd * m)?)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
            let dn = delta.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
            Ok(LinearizationRow { magnitude: m, residual: resid, relative: if dn > 0.0 { resid / dn } else { 0.0 } })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(gaussian_kl(&mu, &s, &mu, &s).unwrap().abs() < 1e-14);
    }

    #[test]
    fn scalar_kl_matches_hand_formula() {
        let (m1, v1, m2, v2) = (0.3, 0.5, -1.0, 2.0);
        let kl = gaussian_kl(
            &DVector::from_vec(vec![m1]),
            &DMatrix::from_element(1, 1, v1),
            &DVector::from_vec(vec![m2]),
            &DMatrix::from_element(1, 1, v2),
        )
        .unwrap();
        let hand = 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
        assert!((kl - hand).abs() < 1e-14);
    }

    #[test]
    fn resize_identity_and_constant() {
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        for m in [Interp::Nearest, Interp::Bilinear, Interp::Bicubic] {
            assert_eq!(resize(&v, 1, (4, 4), (4, 4), m), v);
            let c = resize(&[2.5; 16], 1, (4, 4), (2, 2), m);
            assert!(c.iter().all(|x| (x - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn wide_decoder_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LinearDecoderModel::random(6, 4, &mut rng).is_err());
    }
}
