//! Quantile-thresholded outlier masking of decoder feature maps.
//!
//! A position is kept when `q_lo - m <= f <= q_hi + m`, where the quantiles are
//! order statistics of the flattened map and `m` is twice its (unbiased) standard
//! deviation. The keep-map is then passed through a sliding-window maximum with
//! the `closing` kernel (fills small holes, i.e. isolated false detections) and a
//! sliding-window minimum with the `opening` kernel (grows the masked region around
//! genuine outlier blobs).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierParams {
    pub quant: f64,
    pub opening: usize,
    pub closing: usize,
}

impl Default for OutlierParams {
    fn default() -> Self {
        Self { quant: 0.02, opening: 5, closing: 3 }
    }
}

impl OutlierParams {
    /// Kernel sizes after rescaling for a map `down_f` times coarser than the reference.
    pub fn kernels(&self, down_f: usize) -> (usize, usize) {
        let down_f = down_f.max(1);
        let mut opening = self.opening.div_ceil(down_f);
        let mut closing = self.closing.div_ceil(down_f);
        if opening == 2 {
            opening = 3;
        }
        if closing == 2 {
            closing = 1;
        }
        (opening, closing)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quant > 0.0 && self.quant < 0.5) {
            return Err(LabError::config(format!("outlier quantile {} outside (0, 0.5)", self.quant)));
        }
        if self.opening == 0 || self.closing == 0 {
            return Err(LabError::config("outlier kernels must be positive"));
        }
        Ok(())
    }
}

/// 1-based order-statistic ranks `(k_lo, k_hi)` for `n` values, clamped to `[1, n]`.
pub fn quantile_ranks(n: usize, quant: f64) -> (usize, usize) {
    let k1 = (n as f64 * quant) as usize;
    let k2 = (n as f64 * (1.0 - quant)) as usize;
    (k1.clamp(1, n), k2.clamp(1, n))
}

/// k-th smallest value (1-based).
pub fn kth_smallest(values: &[f64], k: usize) -> f64 {
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

fn unbiased_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Same-size sliding-window maximum over an `h x w` grid, window `k` (odd),
/// ignoring out-of-bounds positions.
fn window_max(grid: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
    if k == 1 {
        return grid.to_vec();
    }
    let r = (k - 1) / 2;
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = grid[y * w + lo..=y * w + hi].iter().copied().max().unwrap_or(0);
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).max().unwrap_or(0);
        }
    }
    out
}

/// Keep-mask (1 = keep) for one `h x w` channel map, row-major.
pub fn detect_outliers(map: &[f64], h: usize, w: usize, down_f: usize, params: &OutlierParams) -> Result<Vec<u8>> {
    params.validate()?;
    if map.len() != h * w || map.is_empty() {
        return Err(LabError::shape(format!("outlier map of {} values for {h}x{w}", map.len())));
    }
    let (opening, closing) = params.kernels(down_f);
    for (name, k) in [("opening", opening), ("closing", closing)] {
        if k > h || k > w {
            return Err(LabError::config(format!("{name} kernel {k} larger than {h}x{w} map")));
        }
        if k % 2 == 0 {
            return Err(LabError::config(format!("{name} kernel {k} must be odd after rescaling")));
        }
    }
    let (k1, k2) = quantile_ranks(map.len(), params.quant);
    let q1 = kth_smallest(map, k1);
    let q2 = kth_smallest(map, k2);
    let m = 2.0 * unbiased_std(map);
    let (lo, hi) = (q1 - m, q2 + m);
    let keep: Vec<u8> = map.iter().map(|&f| u8::from(lo <= f && f <= hi)).collect();
    let closed = window_max(&keep, h, w, closing);
    // min-window == negated max-window of the negation
    let inverted: Vec<u8> = closed.iter().map(|&v| 1 - v).collect();
    Ok(window_max(&inverted, h, w, opening).into_iter().map(|v| 1 - v).collect())
}

/// `(mask, masked_features)` for one channel map.
pub fn mask_features(map: &[f64], h: usize, w: usize, down_f: usize, params: &OutlierParams) -> Result<(Vec<u8>, Vec<f64>)> {
    let mask = detect_outliers(map, h, w, down_f, params)?;
    let masked = map.iter().zip(&mask).map(|(f, &k)| if k == 1 { *f } else { f * 0.0 }).collect();
    Ok((mask, masked))
}

/// Binary keep-maps for one decoder layer, laid out `(batch, channel, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub keep: Vec<u8>,
}

impl LayerMask {
    pub fn full(batch: usize, channels: usize, h: usize, w: usize) -> Self {
        Self { batch, channels, h, w, keep: vec![1; batch * channels * h * w] }
    }

    /// Runs detection independently on every `(sample, channel)` map.
    pub fn detect(features: &[f64], dims: (usize, usize, usize, usize), down_f: usize, params: &OutlierParams) -> Result<Self> {
        let (batch, channels, h, w) = dims;
        if features.len() != batch * channels * h * w {
            return Err(LabError::shape("layer mask: feature count does not match dims"));
        }
        let mut keep = Vec::with_capacity(features.len());
        for plane in features.chunks(h * w) {
            keep.extend(detect_outliers(plane, h, w, down_f, params)?);
        }
        Ok(Self { batch, channels, h, w, keep })
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().map(|&k| k as f64).sum::<f64>() / self.keep.len().max(1) as f64
    }

    pub fn plane(&self, b: usize, c: usize) -> &[u8] {
        let n = self.h * self.w;
        let i = b * self.channels + c;
        &self.keep[i * n..(i + 1) * n]
    }

    /// Writes the sample's channel masks tiled in a grid (white = kept).
    pub fn save_png(&self, sample: usize, path: &Path) -> Result<()> {
        let cols = (self.channels as f64).sqrt().ceil() as usize;
        let rows = self.channels.div_ceil(cols);
        let (gw, gh) = (cols * (self.w + 1), rows * (self.h + 1));
        let mut img = image::GrayImage::from_pixel(gw as u32, gh as u32, image::Luma([64]));
        for c in 0..self.channels {
            let (ox, oy) = ((c % cols) * (self.w + 1), (c / cols) * (self.h + 1));
            for (i, &k) in self.plane(sample, c).iter().enumerate() {
                let (x, y) = (ox + i % self.w, oy + i / self.w);
                img.put_pixel(x as u32, y as u32, image::Luma([if k == 1 { 255 } else { 0 }]));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// Keep-maps for every tap of a feature pyramid, in decoder order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierMask {
    pub layers: Vec<LayerMask>,
    pub params: OutlierParams,
}
