//! Radially averaged log-power spectra of image sets.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{LabError, Result};

pub const LOG_FLOOR: f64 = 1e-10;

/// Luma with weights 0.299 / 0.587 / 0.114 from an HWC RGB image.
pub fn luma(pixels: &[f32]) -> Vec<f64> {
    pixels.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

/// `|FFT2(gray)|^2` in natural (unshifted) layout.
pub fn power_spectrum(gray: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if gray.len() != h * w {
        return Err(LabError::shape(format!("{} values for a {h}x{w} grid", gray.len())));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = gray.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    Ok(buf.iter().map(|c| c.norm_sqr()).collect())
}

/// Signed frequency index of FFT bin `i` out of `n`.
fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Integer radius (rounded) of an FFT bin.
pub fn radius_of(y: usize, x: usize, h: usize, w: usize) -> usize {
    signed_freq(y, h).hypot(signed_freq(x, w)).round() as usize
}

/// Frequency band of a radius relative to the Nyquist radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    Mid,
    High,
}

pub const LOW_BAND_EDGE: f64 = 0.15;
pub const HIGH_BAND_EDGE: f64 = 0.5;

pub fn band_of(radius: usize, nyquist: usize) -> Band {
    let r = radius as f64 / nyquist as f64;
    if r < LOW_BAND_EDGE {
        Band::Low
    } else if r > HIGH_BAND_EDGE {
        Band::High
    } else {
        Band::Mid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumProfile {
    pub h: usize,
    pub w: usize,
    /// `log(mean |FFT|^2 + 1e-10)`, natural FFT layout.
    pub log_power: Vec<f64>,
    /// Mean of `log_power` over each integer-radius annulus, radii `0..min(h, w) / 2`.
    pub radial: Vec<f64>,
}

impl SpectrumProfile {
    pub fn nyquist(&self) -> usize {
        self.h.min(self.w) / 2
    }

    /// `log_power` rearranged so the DC bin sits in the centre.
    pub fn shifted_grid(&self) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[((y + h / 2) % h) * w + (x + w / 2) % w] = self.log_power[y * w + x];
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("radius,log_power\n");
        for (r, v) in self.radial.iter().enumerate() {
            s.push_str(&format!("{r},{v}\n"));
        }
        s
    }
}

pub fn radial_average(grid: &[f64], h: usize, w: usize) -> Vec<f64> {
    let len = h.min(w) / 2;
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for y in 0..h {
        for x in 0..w {
            let r = radius_of(y, x, h, w);
            if r < len {
                sums[r] += grid[y * w + x];
                counts[r] += 1;
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { LOG_FLOOR.ln() }).collect()
}

/// Mean power spectrum over square HWC RGB images of side `res`.
pub fn radial_power_spectrum<'a>(images: impl IntoIterator<Item = &'a [f32]>, res: usize) -> Result<SpectrumProfile> {
    let mut acc = vec![0.0; res * res];
    let mut n = 0usize;
    for img in images {
        if img.len() != res * res * 3 {
            return Err(LabError::shape(format!("image of {} values at {res}px", img.len())));
        }
        for (a, p) in acc.iter_mut().zip(power_spectrum(&luma(img), res, res)?) {
            *a += p;
        }
        n += 1;
    }
    if n == 0 {
        return Err(LabError::config("power spectrum of an empty image set"));
    }
    let log_power: Vec<f64> = acc.iter().map(|p| (p / n as f64 + LOG_FLOOR).ln()).collect();
    let radial = radial_average(&log_power, res, res);
    Ok(SpectrumProfile { h: res, w: res, log_power, radial })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandErrors {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumDifference {
    /// `a - reference`, natural FFT layout.
    pub grid: Vec<f64>,
    pub band_errors: BandErrors,
}

/// Log-power difference of `a` against `reference` and mean absolute radial error per band.
pub fn spectrum_difference(a: &SpectrumProfile, reference: &SpectrumProfile) -> Result<SpectrumDifference> {
    if (a.h, a.w) != (reference.h, reference.w) {
        return Err(LabError::shape(format!(
            "spectrum resolution mismatch: {}x{} vs {}x{}",
            a.h, a.w, reference.h, reference.w
        )));
    }
    let grid = a.log_power.iter().zip(&reference.log_power).map(|(x, y)| x - y).collect();
    let nyq = a.nyquist();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (r, (x, y)) in a.radial.iter().zip(&reference.radial).enumerate() {
        let i = band_of(r, nyq) as usize;
        sums[i] += (x - y).abs();
        counts[i] += 1;
    }
    let mean = |i: usize| if counts[i] > 0 { sums[i] / counts[i] as f64 } else { 0.0 };
    Ok(SpectrumDifference { grid, band_errors: BandErrors { low: mean(0), mid: mean(1), high: mean(2) } })
}
