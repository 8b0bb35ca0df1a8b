//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Brute-force reference: sorted quantiles, unbiased std, naive window max/min.
pub fn outlier_oracle(map: &[f64], h: usize, w: usize, quant: f64, opening: usize, closing: usize) -> Vec<u8> {
    let n = map.len();
    let mut sorted = map.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k1 = ((n as f64 * quant) as usize).clamp(1, n);
    let k2 = ((n as f64 * (1.0 - quant)) as usize).clamp(1, n);
    let mean = map.iter().sum::<f64>() / n as f64;
    let std = (map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let (lo, hi) = (sorted[k1 - 1] - 2.0 * std, sorted[k2 - 1] + 2.0 * std);
    let keep: Vec<u8> = map.iter().map(|&v| u8::from(lo <= v && v <= hi)).collect();
    let window = |g: &[u8], k: usize, take_max: bool| -> Vec<u8> {
        let r = (k / 2) as isize;
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                let mut vals = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            vals.push(g[yy as usize * w + xx as usize]);
                        }
                    }
                }
                if take_max {
                    *vals.iter().max().unwrap()
                } else {
                    *vals.iter().min().unwrap()
                }
            })
            .collect()
    };
    let closed = window(&keep, closing, true);
    window(&closed, opening, false)
}
