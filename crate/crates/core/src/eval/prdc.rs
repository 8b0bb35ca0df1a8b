//! k-NN manifold precision, recall, density and coverage.

use serde::Serialize;

use super::frechet::FeatureSet;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cross(a: &FeatureSet, b: &FeatureSet) -> Vec<f64> {
    let mut d = Vec::with_capacity(a.n * b.n);
    for i in 0..a.n {
        for j in 0..b.n {
            d.push(dist(a.row(i), b.row(j)));
        }
    }
    d
}

/// Distance from each point to its k-th nearest neighbour within the set (self excluded).
pub fn knn_radii(set: &FeatureSet, k: usize) -> Vec<f64> {
    let d = cross(set, set);
    (0..set.n)
        .map(|i| {
            let mut row: Vec<f64> = (0..set.n).filter(|&j| j != i).map(|j| d[i * set.n + j]).collect();
            let (_, v, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *v
        })
        .collect()
}

/// Points on a radius boundary count as inside.
pub fn prdc(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<Prdc> {
    if real.dim != fake.dim {
        return Err(LabError::shape(format!("feature dimensions {} vs {}", real.dim, fake.dim)));
    }
    if k == 0 || real.n <= k || fake.n <= k {
        return Err(LabError::config(format!("prdc needs more than k = {k} points in each set")));
    }
    let real_r = knn_radii(real, k);
    let fake_r = knn_radii(fake, k);
    let d = cross(real, fake); // d[i * fake.n + j] = |real_i - fake_j|
    let at = |i: usize, j: usize| d[i * fake.n + j];

    let precision = (0..fake.n).filter(|&j| (0..real.n).any(|i| at(i, j) <= real_r[i])).count() as f64 / fake.n as f64;
    let recall = (0..real.n).filter(|&i| (0..fake.n).any(|j| at(i, j) <= fake_r[j])).count() as f64 / real.n as f64;
    let covered: usize = (0..fake.n).map(|j| (0..real.n).filter(|&i| at(i, j) <= real_r[i]).count()).sum();
    let density = covered as f64 / (k * fake.n) as f64;
    let coverage = (0..real.n)
        .filter(|&i| (0..fake.n).map(|j| at(i, j)).fold(f64::INFINITY, f64::min) <= real_r[i])
        .count() as f64
        / real.n as f64;
    Ok(Prdc { precision, recall, density, coverage })
}
