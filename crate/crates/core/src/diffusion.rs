//! Noise schedules, the forward process, training targets and clean-latent
//! recovery for DDPM-eps, DDPM-v and Flow-OT.
//!
//! Every framework is written as `z_t = alpha_t * z_0 + sigma_t * eps`.
//! Discrete DDPM timesteps are the integers `1..=T`; Flow-OT time lives in `[0, 1]`.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// What the denoiser predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Eps,
    V,
    Flow,
}

impl std::str::FromStr for Framework {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(Self::Eps),
            "v" => Ok(Self::V),
            "flow" => Ok(Self::Flow),
            other => Err(LabError::config(format!("unknown framework kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    DdpmDiscrete,
    FlowOt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// `betas[t - 1]` for t in 1..=T (empty for flow).
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    zero_terminal: bool,
}

impl NoiseSchedule {
    /// "Quadratic" schedule: linear interpolation in sqrt(beta) between the endpoints.
    pub fn ddpm(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(LabError::config(format!("DDPM schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(LabError::config(format!(
                "DDPM schedule needs 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (steps - 1) as f64;
        let mut betas: Vec<f64> = (0..steps).map(|i| (s0 + i as f64 / last * (s1 - s0)).powi(2)).collect();
        // Pin the endpoints to the requested values (sqrt/square round-trips can be off by an ulp).
        betas[0] = beta_start;
        betas[steps - 1] = beta_end;
        let alpha_bars = cumulative_alpha_bars(&betas);
        Ok(Self { kind: ScheduleKind::DdpmDiscrete, betas, alpha_bars, zero_terminal: false })
    }

    pub fn flow_ot() -> Self {
        Self { kind: ScheduleKind::FlowOt, betas: Vec::new(), alpha_bars: Vec::new(), zero_terminal: true }
    }

    /// Affine rescale of sqrt(alpha_bar) so the last step is pure noise while
    /// sqrt(alpha_bar_1) is preserved; betas are re-derived from the new products.
    pub fn enforce_zero_terminal_snr(&self) -> Result<Self> {
        if self.kind != ScheduleKind::DdpmDiscrete {
            return Err(LabError::config("zero-terminal rescale applies to discrete DDPM schedules only"));
        }
        let sqrt_ab: Vec<f64> = self.alpha_bars.iter().map(|a| a.sqrt()).collect();
        let first = sqrt_ab[0];
        let last = *sqrt_ab.last().expect("T >= 2");
        if last == 0.0 {
            return Ok(Self { zero_terminal: true, ..self.clone() });
        }
        let span = first - last;
        if span <= 0.0 {
            return Err(LabError::numerical("degenerate zero-terminal rescale: sqrt(alpha_bar) is constant"));
        }
        let alpha_bars: Vec<f64> = sqrt_ab.iter().map(|s| ((s - last) * first / span).powi(2)).collect();
        let mut betas = Vec::with_capacity(alpha_bars.len());
        let mut prev = 1.0;
        for &ab in &alpha_bars {
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok(Self { kind: ScheduleKind::DdpmDiscrete, betas, alpha_bars, zero_terminal: true })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn is_zero_terminal(&self) -> bool {
        self.zero_terminal
    }

    /// Number of discrete steps T (0 for the continuous flow path).
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn index(&self, t: f64) -> Result<usize> {
        let idx = t as usize;
        if t.fract() != 0.0 || idx < 1 || idx > self.steps() {
            return Err(LabError::config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(idx - 1)
    }

    fn check_flow(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(LabError::config(format!("flow time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::DdpmDiscrete => Ok(self.alpha_bars[self.index(t)?]),
            ScheduleKind::FlowOt => {
                Self::check_flow(t)?;
                Ok((1.0 - t) * (1.0 - t))
            }
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::DdpmDiscrete => Ok(self.betas[self.index(t)?]),
            ScheduleKind::FlowOt => Err(LabError::config("beta_t is undefined on the flow path")),
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::DdpmDiscrete => Ok(self.alpha_bars[self.index(t)?].sqrt()),
            ScheduleKind::FlowOt => {
                Self::check_flow(t)?;
                Ok(1.0 - t)
            }
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::DdpmDiscrete => Ok((1.0 - self.alpha_bars[self.index(t)?]).sqrt()),
            ScheduleKind::FlowOt => {
                Self::check_flow(t)?;
                Ok(t)
            }
        }
    }

    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        Ok((self.alpha(t)?, self.sigma(t)?))
    }

    /// Noise-to-signal ratio sigma_t / alpha_t (+inf when alpha_t = 0).
    pub fn nsr(&self, t: f64) -> Result<f64> {
        let (a, s) = self.coefficients(t)?;
        Ok(if a == 0.0 { f64::INFINITY } else { s / a })
    }

    /// LPL gate: true iff nsr(t) <= tau (inclusive).
    pub fn gate(&self, t: f64, tau: f64) -> Result<bool> {
        Ok(self.nsr(t)? <= tau)
    }

    /// Fraction of the discrete timesteps whose gate is open.
    pub fn gated_fraction(&self, tau: f64) -> Result<f64> {
        if self.kind != ScheduleKind::DdpmDiscrete {
            // nsr = t / (1 - t) <= tau  <=>  t <= tau / (1 + tau)
            return Ok(tau / (1.0 + tau));
        }
        let open = (1..=self.steps()).filter(|&t| self.gate(t as f64, tau).unwrap_or(false)).count();
        Ok(open as f64 / self.steps() as f64)
    }

    /// Table with columns t, beta, alpha_bar, alpha, sigma, nsr.
    pub fn to_csv(&self) -> Result<String> {
        if self.kind != ScheduleKind::DdpmDiscrete {
            return Err(LabError::config("only discrete schedules have a table"));
        }
        let mut out = String::from("t,beta,alpha_bar,alpha,sigma,nsr\n");
        for t in 1..=self.steps() {
            let tf = t as f64;
            let (a, s) = self.coefficients(tf)?;
            writeln!(out, "{t},{},{},{a},{s},{}", self.betas[t - 1], self.alpha_bars[t - 1], self.nsr(tf)?)
                .expect("writing to a String");
        }
        Ok(out)
    }

    /// DDPM posterior q(z_{t-1} | z_t, z_0): `(coef_z0, coef_zt, variance)`.
    pub fn posterior_coefficients(&self, t: f64) -> Result<(f64, f64, f64)> {
        if self.kind != ScheduleKind::DdpmDiscrete {
            return Err(LabError::config("posterior is defined for discrete DDPM only"));
        }
        let i = self.index(t)?;
        if i == 0 {
            return Err(LabError::config("posterior needs t >= 2"));
        }
        let beta = self.betas[i];
        let ab = self.alpha_bars[i];
        let ab_prev = self.alpha_bars[i - 1];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) * beta / (1.0 - ab);
        Ok((c0, ct, var))
    }

    /// Posterior mean and variance for the given clean and noisy vectors.
    pub fn posterior_params(&self, z0: &[f64], zt: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        if z0.len() != zt.len() {
            return Err(LabError::shape(format!("posterior: {} vs {} elements", z0.len(), zt.len())));
        }
        let (c0, ct, var) = self.posterior_coefficients(t)?;
        Ok((z0.iter().zip(zt).map(|(a, b)| c0 * a + ct * b).collect(), var))
    }
}

fn cumulative_alpha_bars(betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect()
}

/// tau scaled linearly with the resolution ratio.
pub fn scale_threshold(tau_base: f64, base_resolution: usize, resolution: usize) -> f64 {
    tau_base * resolution as f64 / base_resolution as f64
}

/// Sample weight for the diffusion loss when equalising timestep contributions.
pub fn timestep_reweighting(gated: bool, w_lpl: f64, variance_ratio: f64) -> f64 {
    debug_assert!(variance_ratio >= 0.0);
    if gated {
        1.0 + w_lpl * variance_ratio
    } else {
        1.0
    }
}

// Scalar forms, used by the tensor routines below and by tests.

pub fn add_noise_scalar(z0: f64, eps: f64, alpha: f64, sigma: f64) -> f64 {
    alpha * z0 + sigma * eps
}

pub fn target_scalar(kind: Framework, z0: f64, eps: f64, alpha: f64, sigma: f64) -> f64 {
    match kind {
        Framework::Eps => eps,
        Framework::V => alpha * eps - sigma * z0,
        Framework::Flow => eps - z0,
    }
}

pub fn recover_x0_scalar(kind: Framework, zt: f64, pred: f64, alpha: f64, sigma: f64) -> Result<f64> {
    match kind {
        Framework::Eps if alpha == 0.0 => Err(LabError::UndefinedRecovery { t: f64::NAN }),
        Framework::Eps => Ok((zt - sigma * pred) / alpha),
        Framework::V => Ok(alpha * zt - sigma * pred),
        Framework::Flow => Ok(zt - sigma * pred),
    }
}

/// Per-sample coefficient as a `(B, 1, ..., 1)` tensor broadcastable against `like`.
pub fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let dims = like.dims();
    if dims.first() != Some(&values.len()) {
        return Err(LabError::shape(format!("{} coefficients for batch of {:?}", values.len(), dims.first())));
    }
    let mut shape = vec![1usize; dims.len()];
    shape[0] = values.len();
    Ok(Tensor::from_slice(values, shape, like.device())?.to_dtype(like.dtype())?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(LabError::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `z_t = alpha * z_0 + sigma * eps`, coefficients per sample.
pub fn add_noise(z0: &Tensor, eps: &Tensor, alpha: &[f64], sigma: &[f64]) -> Result<Tensor> {
    check_same(z0, eps, "add_noise")?;
    let a = per_sample(alpha, z0)?;
    let s = per_sample(sigma, z0)?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

pub fn training_target(kind: Framework, z0: &Tensor, eps: &Tensor, alpha: &[f64], sigma: &[f64]) -> Result<Tensor> {
    check_same(z0, eps, "training_target")?;
    Ok(match kind {
        Framework::Eps => eps.clone(),
        Framework::V => (eps.broadcast_mul(&per_sample(alpha, z0)?)? - z0.broadcast_mul(&per_sample(sigma, z0)?)?)?,
        Framework::Flow => (eps - z0)?,
    })
}

/// Clean-latent estimate from a prediction; differentiable in `pred`.
pub fn recover_x0(kind: Framework, zt: &Tensor, pred: &Tensor, alpha: &[f64], sigma: &[f64]) -> Result<Tensor> {
    check_same(zt, pred, "recover_x0")?;
    let s = per_sample(sigma, zt)?;
    Ok(match kind {
        Framework::Eps => {
            if let Some(i) = alpha.iter().position(|&a| a == 0.0) {
                return Err(LabError::UndefinedRecovery { t: i as f64 });
            }
            let inv: Vec<f64> = alpha.iter().map(|a| 1.0 / a).collect();
            (zt - pred.broadcast_mul(&s)?)?.broadcast_mul(&per_sample(&inv, zt)?)?
        }
        Framework::V => (zt.broadcast_mul(&per_sample(alpha, zt)?)? - pred.broadcast_mul(&s)?)?,
        Framework::Flow => (zt - pred.broadcast_mul(&s)?)?,
    })
}

/// Mean squared error over every element.
pub fn diffusion_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "diffusion_loss")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Per-sample mean squared error, shape `(B,)`.
pub fn per_sample_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "per_sample_mse")?;
    crate::nn::layers::per_sample_mean(&(pred - target)?.sqr()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
