//! Autoencoder-latent embeddings standing in for classifier features.

use serde::{Deserialize, Serialize};

use super::frechet::FeatureSet;
use crate::autoencoder::AutoencoderModel;
use crate::diffusion::to_f64_vec;
use crate::error::{LabError, Result};
use crate::toydata::ImageSet;

pub const POOL_GRID: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prdc_k: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prdc_k: 5, batch_size: 64 }
    }
}

/// Encoder latents average-pooled to a `4 x 4` grid and flattened (`4 * 4 * 4 = 64` values).
pub fn embed_for_metrics(images: &ImageSet, ae: &AutoencoderModel, batch: usize, tag: &str) -> Result<FeatureSet> {
    let r = ae.latent_resolution();
    if r % POOL_GRID != 0 {
        return Err(LabError::shape(format!("latent side {r} not divisible by the {POOL_GRID}x{POOL_GRID} pool grid")));
    }
    let z = ae.encode_set(images, batch)?;
    let k = r / POOL_GRID;
    let pooled = z.avg_pool2d(k)?;
    let dim = pooled.dims()[1..].iter().product();
    FeatureSet::new(to_f64_vec(&pooled)?, dim, tag)
}
