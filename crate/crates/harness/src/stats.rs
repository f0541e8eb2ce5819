//! Line-delimited JSON training statistics.
//!
//! One record per line, tagged by `kind`. Floats are written with enough
//! digits to read back bit-exactly; non-finite losses are stored as null.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use parkcil_core::env::{Mode, TerminationStatus};
use parkcil_core::learner::LossReport;
use parkcil_core::scheduler::{EpisodeOutcome, Phase};
use serde::{Deserialize, Serialize};

use crate::metrics::EvalMetrics;

/// Learner losses of one update. `None` marks a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub critic0: Option<f64>,
    pub critic1: Option<f64>,
    pub actor: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub ae: Option<f64>,
    pub alpha: Option<f64>,
    pub mean_q: Option<f64>,
    pub aborted: bool,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl From<&LossReport> for LossStats {
    fn from(l: &LossReport) -> Self {
        Self {
            critic0: finite(l.critic[0]),
            critic1: finite(l.critic[1]),
            actor: finite(l.actor),
            alpha_loss: finite(l.alpha_loss),
            ae: finite(l.ae),
            alpha: finite(l.alpha),
            mean_q: finite(l.mean_q),
            aborted: l.aborted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub episode: u64,
    pub step_index: u32,
    pub env_steps: u64,
    pub mode: Mode,
    pub phase: Phase,
    pub reward: f64,
    pub loss: Option<LossStats>,
    pub rl_len: usize,
    pub human_len: usize,
    pub regions: usize,
    pub p_normal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: u64,
    pub slot: usize,
    pub outcome: EpisodeOutcome,
    /// Status of the autonomous part.
    pub status: TerminationStatus,
    pub correction_status: Option<TerminationStatus>,
    pub steps: u32,
    pub correction_steps: u32,
    pub retries: u32,
    pub gear_shifts: u32,
    pub episode_return: f64,
    pub env_steps: u64,
    pub updates: u64,
    pub rl_added: usize,
    pub human_added: usize,
    pub regions_committed: usize,
    pub rl_len: usize,
    pub human_len: usize,
    pub regions: usize,
    pub p_normal: f64,
    pub alpha: f64,
    pub loss: Option<LossStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub after_episode: u64,
    pub env_steps: u64,
    pub trials: usize,
    pub psr: f64,
    pub pcr: f64,
    pub ptr: f64,
    pub pbr: f64,
    pub ngs: f64,
}

impl EvalStats {
    pub fn new(after_episode: u64, env_steps: u64, m: &EvalMetrics) -> Self {
        Self {
            after_episode,
            env_steps,
            trials: m.trials,
            psr: m.psr,
            pcr: m.pcr,
            ptr: m.ptr,
            pbr: m.pbr,
            ngs: m.ngs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatsRecord {
    Step(StepStats),
    Episode(EpisodeStats),
    Eval(EvalStats),
}

/// Append-only stats file, flushed at every episode record.
pub struct StatsWriter {
    out: BufWriter<File>,
}

impl StatsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, record: &StatsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        if !matches!(record, StatsRecord::Step(_)) {
            self.out.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Parsed stats file; unparseable lines are skipped and counted.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsLog {
    pub records: Vec<StatsRecord>,
    pub skipped: usize,
}

impl StatsLog {
    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeStats> {
        self.records.iter().filter_map(|r| match r {
            StatsRecord::Episode(e) => Some(e),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepStats> {
        self.records.iter().filter_map(|r| match r {
            StatsRecord::Step(s) => Some(s),
            _ => None,
        })
    }
}

pub fn read_stats(path: &Path) -> std::io::Result<StatsLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut log = StatsLog {
        records: Vec::new(),
        skipped: 0,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => log.records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping corrupt stats line: {e}", path.display(), i + 1);
                log.skipped += 1;
            }
        }
    }
    Ok(log)
}
