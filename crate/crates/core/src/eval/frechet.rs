//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const JITTER: f64 = 1e-6;

/// `n` feature vectors of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(data: Vec<f64>, dim: usize, tag: impl Into<String>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(LabError::shape(format!("{} values do not split into rows of {dim}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::numerical(format!("non-finite feature at flat index {i}")));
        }
        let n = data.len() / dim;
        if n < dim + 1 {
            log::warn!("feature set with {n} rows in {dim} dimensions: covariance is rank deficient");
        }
        Ok(Self { n, dim, data, tag: tag.into() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for i in 0..self.n {
            for (j, v) in self.row(i).iter().enumerate() {
                m[j] += v;
            }
        }
        m / self.n as f64
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.n {
            let d = DVector::from_iterator(self.dim, self.row(i).iter().zip(mu.iter()).map(|(a, b)| a - b));
            c += &d * d.transpose();
        }
        c / (self.n.max(2) - 1) as f64
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-9 * scale) {
        return Err(LabError::numerical(format!("covariance not PSD after jitter (eigenvalue {bad})")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Trace of the principal square root of `a * b` for symmetric PSD `a`, `b`,
/// computed as `tr sqrt(a^{1/2} b a^{1/2})`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let sa = sym_sqrt(a)?;
    let inner = &sa * b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-9 * scale) {
        return Err(LabError::numerical(format!("product of covariances not PSD (eigenvalue {bad})")));
    }
    Ok(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})` with `1e-6` diagonal jitter.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(LabError::shape("Fréchet statistics have mismatched dimensions"));
    }
    let jitter = DMatrix::<f64>::identity(d, d) * JITTER;
    let ca = cov_a + &jitter;
    let cb = cov_b + &jitter;
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb)?)
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.n == 0 || b.n == 0 {
        return Err(LabError::config("Fréchet distance of an empty feature set"));
    }
    if a.dim != b.dim {
        return Err(LabError::shape(format!("feature dimensions {} vs {}", a.dim, b.dim)));
    }
    frechet_from_stats(&a.mean(), &a.covariance(), &b.mean(), &b.covariance())
}
