//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, TeacherConfig};
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::feedback::{FeedbackConfig, RewardTrainConfig};
use crate::oracle::GmmSpec;
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "TSCD_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Inline mixture; ignored when `spec_file` is set.
    pub spec: GmmSpec,
    /// JSON or TOML file holding a mixture, relative to the config file.
    pub spec_file: Option<PathBuf>,
    pub schedule: ScheduleKind,
    pub total_timesteps: usize,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub enhance: EnhanceConfig,
    pub feedback: FeedbackConfig,
    pub reward: RewardTrainConfig,
    pub eval: EvalConfigToml,
}

/// Evaluation section; mirrors [`EvalConfig`] plus the step counts to report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfigToml {
    pub steps: Vec<usize>,
    pub n: usize,
    pub projections: usize,
    pub coverage_multiplier: f64,
    pub reward: crate::feedback::RewardKind,
    pub omega: f64,
    pub gamma: f64,
}

impl Default for EvalConfigToml {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            steps: vec![1, 2, 4, 8],
            n: e.n,
            projections: e.projections,
            coverage_multiplier: e.coverage_multiplier,
            reward: e.reward,
            omega: e.omega,
            gamma: e.gamma,
        }
    }
}

impl EvalConfigToml {
    pub fn to_eval(&self) -> EvalConfig {
        EvalConfig {
            n: self.n,
            projections: self.projections,
            coverage_multiplier: self.coverage_multiplier,
            reward: self.reward,
            omega: self.omega,
            gamma: self.gamma,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            spec: GmmSpec::default(),
            spec_file: None,
            schedule: ScheduleKind::Linear,
            total_timesteps: 1000,
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            enhance: EnhanceConfig::default(),
            feedback: FeedbackConfig::default(),
            reward: RewardTrainConfig::default(),
            eval: EvalConfigToml::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(config_err)?;
        config.check()?;
        Ok(config)
    }

    /// Reads a config file; a relative `spec_file` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text)?;
        if let (Some(spec), Some(dir)) = (&config.spec_file, path.parent()) {
            if spec.is_relative() {
                config.spec_file = Some(dir.join(spec));
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    fn check(&self) -> Result<()> {
        self.spec.validate()?;
        self.distill.validate()?;
        self.enhance.validate(self.total_timesteps)?;
        self.feedback.validate(self.total_timesteps)?;
        if self.teacher.denoiser.total_timesteps != self.total_timesteps {
            return Err(Error::Config("teacher.denoiser.total_timesteps must equal total_timesteps".into()));
        }
        Ok(())
    }

    pub fn resolve_spec(&self) -> Result<GmmSpec> {
        let Some(path) = &self.spec_file else {
            return Ok(self.spec.clone());
        };
        let text = std::fs::read_to_string(path)?;
        let spec: GmmSpec = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(config_err)?
        } else {
            serde_json::from_str(&text)?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.total_timesteps, self.schedule)
    }

    /// `output_dir`, unless the override variable is set.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}
