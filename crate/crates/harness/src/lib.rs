//! Scenarios, training and evaluation drivers, the scripted corrector, stats
//! logging and the operator session server.

pub mod config;
pub mod corrector;
pub mod eval;
pub mod metrics;
pub mod scenario;
pub mod session;
pub mod stats;
pub mod train;

use parkcil_core::env::EnvError;
use parkcil_core::learner::LearnerError;
use parkcil_core::replay::ReplayError;
use parkcil_core::scheduler::SchedulerError;
use thiserror::Error;

pub use config::{IntervenorMode, TrainConfig};
pub use eval::run_evaluation;
pub use metrics::EvalMetrics;
pub use scenario::Scenario;
pub use train::{run_training, TrainSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("session: {0}")]
    Session(String),
}
