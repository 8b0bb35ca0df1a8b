//! Latent perceptual loss: shared-statistics standardization of decoder features,
//! outlier masking, depth weighting and noise-level gating.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderModel, FeaturePyramid};
use crate::diffusion::{scale_threshold, to_f64_vec};
use crate::error::{LabError, Result};
use crate::outlier::{LayerMask, OutlierParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthWeighting {
    /// `r_1 / r_l`: halves whenever the tap resolution doubles.
    ProseInverseUpscale,
    Uniform,
    /// `2^(-r_l / r_1)`.
    LiteralExponential,
}

pub fn depth_weights(resolutions: &[usize], policy: DepthWeighting) -> Result<Vec<f64>> {
    let Some(&r1) = resolutions.first() else { return Ok(Vec::new()) };
    if resolutions.iter().any(|&r| r < r1 || r == 0) {
        return Err(LabError::config(format!("tap resolutions {resolutions:?} must be positive and >= the first")));
    }
    Ok(resolutions
        .iter()
        .map(|&r| match policy {
            DepthWeighting::ProseInverseUpscale => r1 as f64 / r as f64,
            DepthWeighting::Uniform => 1.0,
            DepthWeighting::LiteralExponential => 2f64.powf(-(r as f64) / r1 as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LplConfig {
    pub enabled: bool,
    /// Noise-to-signal threshold at `base_resolution`.
    pub tau: f64,
    pub base_resolution: usize,
    pub w_lpl: f64,
    pub weighting: DepthWeighting,
    pub mask_outliers: bool,
    pub quant: f64,
    pub opening: usize,
    pub closing: usize,
    pub std_floor: f64,
    pub detach_stats: bool,
}

impl Default for LplConfig {
    fn default() -> Self {
        let o = OutlierParams::default();
        Self {
            enabled: true,
            tau: 1.5,
            base_resolution: 64,
            w_lpl: 3.0,
            weighting: DepthWeighting::ProseInverseUpscale,
            mask_outliers: true,
            quant: o.quant,
            opening: o.opening,
            closing: o.closing,
            std_floor: 1e-6,
            detach_stats: true,
        }
    }
}

impl LplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LabError::config(format!("lpl.tau must be positive, got {}", self.tau)));
        }
        if !(self.w_lpl >= 0.0 && self.w_lpl.is_finite()) {
            return Err(LabError::config(format!("lpl.w_lpl must be finite and >= 0, got {}", self.w_lpl)));
        }
        if !(self.std_floor > 0.0) || self.base_resolution == 0 {
            return Err(LabError::config("lpl.std_floor and lpl.base_resolution must be positive"));
        }
        self.outlier_params().validate()
    }

    pub fn outlier_params(&self) -> OutlierParams {
        OutlierParams { quant: self.quant, opening: self.opening, closing: self.closing }
    }

    /// Threshold rescaled to the image resolution actually used.
    pub fn threshold(&self, resolution: usize) -> f64 {
        scale_threshold(self.tau, self.base_resolution, resolution)
    }
}

pub fn total_loss(l_diff: &Tensor, l_lpl: &Tensor, w_lpl: f64) -> Result<Tensor> {
    Ok((l_diff + (l_lpl * w_lpl)?)?)
}

/// Per-channel mean and standard deviation of `phi_hat` over kept positions.
///
/// Returns `(mu, sigma, n_kept)`, each `(B, C, 1, 1)`. Empty channels get `mu = 0, sigma = 1`.
fn masked_stats(phi_hat: &Tensor, mask: &Tensor, std_floor: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let n = mask.sum_keepdim((2, 3))?;
    let n_safe = n.maximum(1.0)?;
    let mu = (mask * phi_hat)?.sum_keepdim((2, 3))?.div(&n_safe)?;
    let centered = phi_hat.broadcast_sub(&mu)?;
    let var = (mask * centered.sqr()?)?.sum_keepdim((2, 3))?.div(&n_safe)?;
    let sigma = var.maximum(std_floor * std_floor)?.sqrt()?;
    let empty = n.eq(0.0)?;
    let sigma = empty.where_cond(&sigma.ones_like()?, &sigma)?;
    Ok((mu, sigma, n))
}

/// Shifts and scales both tensors by the statistics of `phi_hat` over `mask`.
pub fn standardize_shared(
    phi: &Tensor,
    phi_hat: &Tensor,
    mask: &Tensor,
    std_floor: f64,
    detach_stats: bool,
) -> Result<(Tensor, Tensor)> {
    if phi.dims() != phi_hat.dims() || mask.dims() != phi.dims() {
        return Err(LabError::shape(format!(
            "standardize: {:?} / {:?} / mask {:?}",
            phi.dims(),
            phi_hat.dims(),
            mask.dims()
        )));
    }
    let source = if detach_stats { phi_hat.detach() } else { phi_hat.clone() };
    let (mu, sigma, _) = masked_stats(&source, mask, std_floor)?;
    let norm = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_sub(&mu)?.broadcast_div(&sigma)?) };
    Ok((norm(phi)?, norm(phi_hat)?))
}

pub fn mask_tensor(mask: &LayerMask, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = mask.keep.iter().map(|&k| k as f32).collect();
    Ok(Tensor::from_vec(data, (mask.batch, mask.channels, mask.h, mask.w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Loss value plus diagnostics.
#[derive(Debug, Clone)]
pub struct LplTerms {
    /// Scalar: mean over the whole batch, gated-off samples counting as 0.
    pub loss: Tensor,
    /// `omega_l` times the layer term, averaged the same way.
    pub per_layer: Vec<f64>,
    pub gated: usize,
    pub empty_channels: usize,
    pub kept_fraction: Vec<f64>,
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    let (_, c, h, w) = t.dims4()?;
    let v = to_f64_vec(t)?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        let ch = (i / (h * w)) % c;
        return Err(LabError::numerical(format!("non-finite feature in layer {} channel {ch}", layer + 1)));
    }
    Ok(())
}

/// Weighted layer sum over aligned pyramids that contain only gated samples.
///
/// `batch` is the full batch size used for the mean.
pub fn lpl_from_pyramids(
    phi: &FeaturePyramid,
    phi_hat: &FeaturePyramid,
    masks: &[LayerMask],
    omega: &[f64],
    batch: usize,
    cfg: &LplConfig,
) -> Result<LplTerms> {
    if phi.len() != phi_hat.len() || masks.len() != phi.len() || omega.len() != phi.len() {
        return Err(LabError::shape("lpl: pyramids, masks and weights must have the same depth"));
    }
    let mut total: Option<Tensor> = None;
    let mut per_layer = Vec::with_capacity(phi.len());
    let mut empty_channels = 0;
    let mut kept_fraction = Vec::with_capacity(phi.len());
    for (l, ((f, fh), m)) in phi.features.iter().zip(&phi_hat.features).zip(masks).enumerate() {
        check_finite(f, l)?;
        check_finite(fh, l)?;
        let mt = mask_tensor(m, fh.dtype())?;
        empty_channels += (0..m.batch * m.channels)
            .filter(|&i| m.keep[i * m.h * m.w..(i + 1) * m.h * m.w].iter().all(|&k| k == 0))
            .count();
        kept_fraction.push(m.kept_fraction());
        let (fp, fhp) = standardize_shared(f, fh, &mt, cfg.std_floor, cfg.detach_stats)?;
        let d = ((fp - fhp)? * &mt)?;
        let layer = (d.sqr()?.flatten_from(1)?.mean(D::Minus1)?.sum_all()? * (omega[l] / batch as f64))?;
        per_layer.push(layer.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        total = Some(match total {
            None => layer,
            Some(t) => (t + layer)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => Tensor::new(0.0, &Device::Cpu)?.to_dtype(DType::F32)?,
    };
    Ok(LplTerms { loss, per_layer, gated: phi.features.first().map_or(0, |f| f.dims()[0]), empty_channels, kept_fraction })
}

/// Outlier masks for every layer of a pyramid (all ones if masking is off).
pub fn detect_masks(pyramid: &FeaturePyramid, image_resolution: usize, cfg: &LplConfig) -> Result<Vec<LayerMask>> {
    pyramid
        .features
        .iter()
        .map(|f| {
            let (b, c, h, w) = f.dims4()?;
            if !cfg.mask_outliers {
                return Ok(LayerMask::full(b, c, h, w));
            }
            let down_f = (image_resolution / h).max(1);
            LayerMask::detect(&to_f64_vec(f)?, (b, c, h, w), down_f, &cfg.outlier_params())
        })
        .collect()
}

fn select(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
    let ids = Tensor::from_vec(idx.to_vec(), idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

/// Decodes the gated samples of `z0` (no gradient) and `z0_hat` (differentiable)
/// and evaluates the loss. `fixed_masks`, if given, must be aligned with the gated samples.
pub fn latent_perceptual_loss(
    ae: &AutoencoderModel,
    cfg: &LplConfig,
    z0: &Tensor,
    z0_hat: &Tensor,
    gate: &[bool],
    fixed_masks: Option<&[LayerMask]>,
) -> Result<LplTerms> {
    let batch = z0.dims()[0];
    if z0.dims() != z0_hat.dims() || gate.len() != batch {
        return Err(LabError::shape(format!(
            "lpl: z0 {:?}, z0_hat {:?}, {} gate flags",
            z0.dims(),
            z0_hat.dims(),
            gate.len()
        )));
    }
    let idx: Vec<u32> = (0..batch as u32).filter(|&i| gate[i as usize]).collect();
    let omega = depth_weights(&ae.tap_resolutions(), cfg.weighting)?;
    if idx.is_empty() {
        let zero = (z0_hat.sum_all()? * 0.0)?;
        return Ok(LplTerms {
            loss: zero,
            per_layer: vec![0.0; omega.len()],
            gated: 0,
            empty_channels: 0,
            kept_fraction: vec![1.0; omega.len()],
        });
    }
    let (phi, _) = ae.decode_with_taps(&select(&z0.detach(), &idx)?)?;
    let phi = FeaturePyramid { features: phi.features.iter().map(|f| f.detach()).collect() };
    let (phi_hat, _) = ae.decode_with_taps(&select(z0_hat, &idx)?)?;
    let masks = match fixed_masks {
        Some(m) => m.to_vec(),
        None => detect_masks(&phi_hat, ae.resolution(), cfg)?,
    };
    lpl_from_pyramids(&phi, &phi_hat, &masks, &omega, batch, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(v: &[f64], dims: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn depth_weight_policies() {
        let r = [16, 32, 64, 64];
        assert_eq!(depth_weights(&r, DepthWeighting::ProseInverseUpscale).unwrap(), vec![1.0, 0.5, 0.25, 0.25]);
        assert_eq!(depth_weights(&r, DepthWeighting::Uniform).unwrap(), vec![1.0; 4]);
        assert_eq!(depth_weights(&r, DepthWeighting::LiteralExponential).unwrap(), vec![0.5, 0.25, 0.0625, 0.0625]);
        for p in [DepthWeighting::ProseInverseUpscale, DepthWeighting::Uniform] {
            assert_eq!(depth_weights(&[8], p).unwrap(), vec![1.0]);
        }
        assert!(depth_weights(&[32, 16], DepthWeighting::Uniform).is_err());
    }

    #[test]
    fn standardize_hand_example() -> Result<()> {
        let phi_hat = t4(&[1.0, 3.0, 1.0, 3.0], (1, 1, 2, 2));
        let phi = t4(&[2.0; 4], (1, 1, 2, 2));
        let mask = phi.ones_like()?;
        let (a, b) = standardize_shared(&phi, &phi_hat, &mask, 1e-6, true)?;
        assert_eq!(to_f64_vec(&a)?, vec![0.0; 4]);
        assert_eq!(to_f64_vec(&b)?, vec![-1.0, 1.0, -1.0, 1.0]);

        let omega = [1.0];
        let masks = [LayerMask::full(1, 1, 2, 2)];
        let terms = lpl_from_pyramids(
            &FeaturePyramid { features: vec![phi] },
            &FeaturePyramid { features: vec![phi_hat] },
            &masks,
            &omega,
            1,
            &LplConfig::default(),
        )?;
        assert_eq!(terms.loss.to_scalar::<f64>()?, 1.0);
        Ok(())
    }

    #[test]
    fn constant_channel_is_floored() -> Result<()> {
        let c = t4(&[5.0; 4], (1, 1, 2, 2));
        let (a, b) = standardize_shared(&c, &c, &c.ones_like()?, 1e-6, false)?;
        assert!(to_f64_vec(&a)?.iter().chain(&to_f64_vec(&b)?).all(|v| v.is_finite()));
        Ok(())
    }

    #[test]
    fn empty_channel_uses_unit_stats() -> Result<()> {
        let x = t4(&[1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        let (a, _) = standardize_shared(&x, &x, &x.zeros_like()?, 1e-6, true)?;
        assert_eq!(to_f64_vec(&a)?, vec![1.0, 2.0, 3.0, 4.0]);
        Ok(())
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(LplConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LplConfig { w_lpl: -1.0, ..Default::default() }.validate().is_err());
        assert!(LplConfig::default().validate().is_ok());
        assert_eq!(LplConfig::default().threshold(128), 3.0);
    }
}
