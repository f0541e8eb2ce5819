//! Evaluation metrics.

use parkcil_core::env::TerminationStatus;
use serde::{Deserialize, Serialize};

/// One evaluation trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub slot: usize,
    pub seed: u64,
    pub status: TerminationStatus,
    pub steps: u32,
    pub gear_shifts: u32,
    pub episode_return: f64,
}

/// Success, collision, timeout and boundary rates in percent, and the mean
/// number of gear shifts. Every trial has exactly one status, so the four
/// rates add up to 100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub trials: usize,
    pub psr: f64,
    pub pcr: f64,
    pub ptr: f64,
    pub pbr: f64,
    pub ngs: f64,
    pub records: Vec<TrialRecord>,
}

impl EvalMetrics {
    pub fn from_records(records: Vec<TrialRecord>) -> Self {
        let n = records.len();
        let pct = |s: TerminationStatus| {
            if n == 0 {
                0.0
            } else {
                100.0 * records.iter().filter(|r| r.status == s).count() as f64 / n as f64
            }
        };
        let ngs = if n == 0 {
            0.0
        } else {
            records.iter().map(|r| r.gear_shifts as f64).sum::<f64>() / n as f64
        };
        Self {
            trials: n,
            psr: pct(TerminationStatus::Arrived),
            pcr: pct(TerminationStatus::Collision),
            ptr: pct(TerminationStatus::Timeout),
            pbr: pct(TerminationStatus::Oob),
            ngs,
            records,
        }
    }

    pub fn rate_sum(&self) -> f64 {
        self.psr + self.pcr + self.ptr + self.pbr
    }

    /// Checks that the four rates partition the trials.
    pub fn partition_holds(&self) -> bool {
        self.trials > 0 && (self.rate_sum() - 100.0).abs() < 1e-9
    }
}
