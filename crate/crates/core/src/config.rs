//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeTrainConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{Framework, NoiseSchedule};
use crate::error::{LabError, Result};
use crate::eval::EvalConfig;
use crate::lpl::LplConfig;
use crate::samplers::SamplerConfig;
use crate::toydata::DataSpec;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 0.00085, beta_end: 0.012, zero_terminal: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub framework: Framework,
    pub data: DataSpec,
    pub ae: AeTrainConfig,
    pub schedule: ScheduleConfig,
    pub lpl: LplConfig,
    pub denoiser: DenoiserConfig,
    pub trainer: TrainerConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            framework: Framework::Eps,
            data: DataSpec::default(),
            ae: AeTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            lpl: LplConfig::default(),
            denoiser: DenoiserConfig::default(),
            trainer: TrainerConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::MissingInput(format!("config file {}", path.display())),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.lpl.validate()?;
        self.denoiser.validate()?;
        self.trainer.validate()?;
        self.sampler.validate()?;
        if self.data.classes > self.denoiser.classes {
            return Err(LabError::config(format!(
                "data.classes = {} exceeds denoiser.classes = {}",
                self.data.classes, self.denoiser.classes
            )));
        }
        if self.framework != Framework::Flow && self.sampler.steps > self.schedule.steps {
            return Err(LabError::config("sampler.steps exceeds schedule.steps"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        if self.framework == Framework::Flow {
            return Ok(NoiseSchedule::flow_ot());
        }
        let s = &self.schedule;
        let sched = NoiseSchedule::ddpm(s.steps, s.beta_start, s.beta_end)?;
        if s.zero_terminal {
            sched.enforce_zero_terminal_snr()
        } else {
            Ok(sched)
        }
    }

    /// Sets one of the sweepable parameters by name.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "tau" | "tau_sigma" => self.lpl.tau = value,
            "w_lpl" => self.lpl.w_lpl = value,
            "gamma_ema" | "ema" => {
                self.trainer.ema_with_lpl = value;
                self.trainer.ema_without_lpl = value;
            }
            other => return Err(LabError::config(format!("unknown sweep parameter {other:?} (tau, w_lpl, gamma_ema)"))),
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_ok());
        assert!(matches!(RunConfig::from_json(r#"{"sede": 1}"#), Err(LabError::Config(_))));
        assert!(RunConfig::from_json(r#"{"lpl": {"tau": 2, "bogus": 1}}"#).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = RunConfig { seed: 9, ..Default::default() };
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }
}
