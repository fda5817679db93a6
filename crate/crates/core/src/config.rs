//! JSON run configuration for registrations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::MAX_BETA;
use crate::error::{LordError, Result};
use crate::ffd::DEFAULT_DET_FLOOR;
use crate::gradient::MAX_SIGMA;
use crate::optimizer::{RegisterOptions, Schedule, ScheduleStep};

/// Input and output files; every entry can also be given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffd: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

fn default_sigma() -> f64 {
    0.6
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_beta() -> f64 {
    1.0
}
fn default_det_floor() -> f64 {
    DEFAULT_DET_FLOOR
}
fn default_depth() -> usize {
    10
}
fn default_initial_step() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: Vec<ScheduleStep>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Parzen window width in bins.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Resample both images to this many directions before registering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(default = "default_det_floor")]
    pub det_floor: f64,
    #[serde(default = "default_depth")]
    pub lbfgs_depth: usize,
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// Phantom settings: spacings 4, 3.5, 3, 2, 20 bins, κ = 15.
    pub fn phantom() -> Self {
        RunConfig::with_schedule(Schedule::phantom(15.0).expect("valid schedule").steps)
    }

    fn with_schedule(schedule: Vec<ScheduleStep>) -> Self {
        RunConfig {
            schedule,
            sigma: default_sigma(),
            lambda: default_lambda(),
            beta: default_beta(),
            seed: 0,
            directions: None,
            det_floor: default_det_floor(),
            lbfgs_depth: default_depth(),
            initial_step: default_initial_step(),
            paths: Paths::default(),
        }
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LordError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LordError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let bad = |m: String| Err(LordError::Config(m));
        if !(0.0..=MAX_SIGMA).contains(&self.sigma) {
            return bad(format!("sigma must be in [0, {MAX_SIGMA}], got {}", self.sigma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a nonnegative number, got {}", self.lambda));
        }
        if !(0.0..=MAX_BETA).contains(&self.beta) {
            return bad(format!("beta must be in [0, {MAX_BETA}], got {}", self.beta));
        }
        if !(self.det_floor > 0.0 && self.det_floor < 1.0) {
            return bad(format!("det_floor must be in (0, 1), got {}", self.det_floor));
        }
        if self.lbfgs_depth == 0 {
            return bad("lbfgs_depth must be at least 1".into());
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return bad(format!("initial_step must be positive, got {}", self.initial_step));
        }
        if self.directions == Some(0) {
            return bad("directions must be at least 1".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = Schedule { steps: self.schedule.clone() };
        s.validate()?;
        Ok(s)
    }

    pub fn register_options(&self, deterministic: bool) -> RegisterOptions {
        RegisterOptions {
            sigma: self.sigma,
            lambda: self.lambda,
            beta: self.beta,
            det_floor: self.det_floor,
            lbfgs_depth: self.lbfgs_depth,
            initial_step: self.initial_step,
            seed: self.seed,
            directions: self.directions,
            deterministic,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::phantom()
    }
}
