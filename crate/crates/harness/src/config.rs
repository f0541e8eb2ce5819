//! Training configuration.

use std::path::{Path, PathBuf};

use parkcil_core::env::{EnvConfig, RewardParams};
use parkcil_core::learner::LearnerConfig;
use parkcil_core::replay::ReplayConfig;
use parkcil_core::scheduler::SchedulerConfig;
use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorConfig;
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IntervenorMode {
    /// Plain SAC: failures go to replay as ordinary data.
    None,
    /// The geometric corrector stands in for the operator.
    Scripted,
    /// A human operator over the session protocol.
    Interactive,
}

/// Everything one training run needs. Field defaults follow the reference
/// hyperparameters; lengths are meters, times are steps unless suffixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Built-in scenario name or path to a scenario file.
    pub scenario: String,
    /// Upper bound on episodes.
    pub episodes: u64,
    /// Stop after the episode that crosses this many environment steps
    /// (autonomous and correction steps both count).
    pub max_env_steps: Option<u64>,
    /// Minibatch size B; must be even (half pairs).
    pub batch_size: usize,
    /// No updates until the notebook holds this many transitions.
    pub update_after: usize,
    /// Uniform random actions for this many initial policy steps.
    pub random_steps: u64,
    /// Failed segments must be longer than this to be corrected.
    pub n_min: usize,
    /// Step budget of one correction attempt.
    pub correction_t_tol: u32,
    pub max_retries: Option<u32>,
    pub intervenor: IntervenorMode,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write a parameter checkpoint every this many episodes (0 = final only).
    pub checkpoint_every: u64,
    /// Log a step record every this many steps (0 = none).
    pub step_log_every: u64,
    /// Slots to train on; empty means every slot of the scenario.
    pub slots: Vec<usize>,
    pub env: EnvConfig,
    pub reward: RewardParams,
    pub learner: LearnerConfig,
    pub replay: ReplayConfig,
    pub corrector: CorrectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sched = SchedulerConfig::default();
        Self {
            scenario: "open-lot".into(),
            episodes: 1000,
            max_env_steps: None,
            batch_size: sched.batch_size,
            update_after: sched.update_after,
            random_steps: 0,
            n_min: sched.n_min,
            correction_t_tol: sched.correction_t_tol,
            max_retries: sched.max_retries,
            intervenor: IntervenorMode::Scripted,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 100,
            step_log_every: 100,
            slots: Vec::new(),
            env: EnvConfig::default(),
            reward: RewardParams::default(),
            learner: LearnerConfig::default(),
            replay: ReplayConfig::default(),
            corrector: CorrectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch_size must be a positive even number, got {}", self.batch_size));
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        if self.correction_t_tol == 0 {
            return bad("correction_t_tol must be positive".into());
        }
        if self.env.substeps == 0 || self.env.dt.is_nan() || self.env.dt <= 0.0 || self.env.t_tol == 0 {
            return bad("env dt, substeps and t_tol must be positive".into());
        }
        self.learner.validate()?;
        Ok(())
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            n_min: self.n_min,
            correction_t_tol: self.correction_t_tol,
            max_retries: self.max_retries,
            batch_size: self.batch_size,
            update_after: self.update_after,
            deterministic_policy: false,
            seed: self.seed,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train configs always serialize")
    }
}
