//! Correction-in-the-loop episode state machine.
//!
//! Autonomous transitions are held in a pending buffer and only committed at
//! the end of an episode. A failure after the last checkpoint rewinds the
//! environment to that checkpoint and hands control to the intervenor; a
//! successful correction is stored next to the failed segment as one
//! correction region of the notebook.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    EnvError, EnvSnapshot, Mode, Observation, ParkingEnv, RewardBreakdown, TerminationStatus, Transition,
};
use crate::geometry::Pose2D;
use crate::learner::{Batch, LossReport, SacLearner};
use crate::replay::{NormalKind, Notebook, ReplayError};
use crate::vehicle::{inverse_kinematics, Action};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("event {event:?} is not allowed in phase {phase:?} with mode {mode:?}")]
    IllegalEvent { event: OperatorEvent, phase: Phase, mode: Mode },
    #[error("no checkpoint to roll back to")]
    NoCheckpoint,
    #[error("{0}")]
    Lifecycle(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Autonomous,
    Correcting,
    AwaitingDecision,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Autonomous => "autonomous",
            Phase::Correcting => "correcting",
            Phase::AwaitingDecision => "awaiting_decision",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorEvent {
    TakeControl,
    ReleaseToRl,
    HandBack,
    Retry,
    Discard,
}

/// Rollback point.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub pose: Pose2D,
    pub sim_time: f64,
    pub obs: Observation,
    pub step_index: u32,
    /// Start of the pending autonomous segment this checkpoint guards.
    pub pending_cursor: usize,
    pub snapshot: EnvSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// A failed segment must be strictly longer than this to be corrected.
    pub n_min: usize,
    /// Step budget of one correction attempt, counted from rollback.
    pub correction_t_tol: u32,
    /// `None` retries until the intervenor discards.
    pub max_retries: Option<u32>,
    pub batch_size: usize,
    /// No learner updates until the notebook holds this many transitions.
    pub update_after: usize,
    /// Use the mean action instead of sampling.
    pub deterministic_policy: bool,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_min: 5,
            correction_t_tol: 120,
            max_retries: None,
            batch_size: 32,
            update_after: 32,
            deterministic_policy: false,
            seed: 0,
        }
    }
}

/// Everything the intervenor may look at when deciding.
pub struct StepContext<'a> {
    pub episode: u64,
    pub phase: Phase,
    pub mode: Mode,
    pub env: &'a ParkingEnv,
    pub retries: u32,
    pub correction_steps: u32,
}

/// Source of operator events and human controls.
pub trait Intervenor {
    /// A disabled intervenor turns the loop into plain SAC.
    fn enabled(&self) -> bool {
        true
    }
    /// Drains pending operator events. Called exactly once per step boundary.
    fn poll_events(&mut self, ctx: &StepContext<'_>) -> Vec<OperatorEvent>;
    /// Raw command for a human-controlled step.
    fn human_action(&mut self, ctx: &StepContext<'_>) -> Action;
    /// Called after every rollback, before the first correction step.
    fn on_rollback(&mut self, _ctx: &StepContext<'_>) {}
    /// Retry or discard after a rejected correction attempt.
    fn decide(&mut self, ctx: &StepContext<'_>) -> OperatorEvent;
    /// Outcome of one polled event; `ctx` reflects the state after it.
    fn on_event(&mut self, _event: OperatorEvent, _accepted: bool, _ctx: &StepContext<'_>) {}
}

/// Intervenor that never acts.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoIntervenor;

impl Intervenor for NoIntervenor {
    fn enabled(&self) -> bool {
        false
    }
    fn poll_events(&mut self, _: &StepContext<'_>) -> Vec<OperatorEvent> {
        Vec::new()
    }
    fn human_action(&mut self, _: &StepContext<'_>) -> Action {
        Action::ZERO
    }
    fn decide(&mut self, _: &StepContext<'_>) -> OperatorEvent {
        OperatorEvent::Discard
    }
}

/// Action source and, optionally, learner.
pub trait Agent {
    fn act(&mut self, obs: &Observation, deterministic: bool) -> Action;
    /// One gradient update; `None` when the agent does not learn.
    fn update(&mut self, _batch: &[&Transition]) -> Option<LossReport> {
        None
    }
}

impl Agent for SacLearner {
    fn act(&mut self, obs: &Observation, deterministic: bool) -> Action {
        SacLearner::act(self, obs, deterministic)
    }

    fn update(&mut self, batch: &[&Transition]) -> Option<LossReport> {
        let b = Batch::from_transitions(batch, self.config().action_scale).ok()?;
        Some(SacLearner::update(self, &b))
    }
}

/// Per-step record for loggers and the session server.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub episode: u64,
    pub step_index: u32,
    pub pose: Pose2D,
    /// Executed (raw) action.
    pub action: Action,
    pub mode: Mode,
    pub phase: Phase,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub status: Option<TerminationStatus>,
    pub rl_len: usize,
    pub human_len: usize,
    pub regions: usize,
    /// Rollbacks requested in this episode so far.
    pub retries: u32,
    /// Probability of drawing the normal region after this step.
    pub p_normal: f64,
    pub loss: Option<LossReport>,
    pub ik_residual: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeOutcome {
    /// Reached the slot without a correction.
    Arrived,
    /// Failed and the pending segment was dropped (too short or human-driven).
    Failed,
    /// Failed with the intervenor disabled; pending segment kept as normal data.
    FailedCommitted,
    /// Failed, corrected and stored as a correction region.
    Corrected,
    /// Failed and every correction attempt was discarded.
    Discarded,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: u64,
    pub outcome: EpisodeOutcome,
    /// Status that ended the autonomous part of the episode.
    pub autonomous_status: TerminationStatus,
    /// Status that ended the last correction attempt, if any.
    pub correction_status: Option<TerminationStatus>,
    pub autonomous_steps: u32,
    pub correction_steps: u32,
    pub retries: u32,
    pub gear_shifts: u32,
    pub autonomous_return: f64,
    pub rl_added: usize,
    pub human_added: usize,
    pub regions_added: usize,
    pub updates: u64,
    pub last_loss: Option<LossReport>,
    pub rejected_events: Vec<(OperatorEvent, Phase)>,
}

/// Receives step and episode records.
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_episode(&mut self, _report: &EpisodeReport) {}
}

impl Observer for () {}

/// Failure indicator: terminal and not arrived.
pub fn detect_failure(t: &Transition) -> bool {
    t.done && t.status.is_some_and(|s| s.is_failure())
}

/// Counts direction reversals among speeds with magnitude above `threshold`.
pub fn count_gear_shifts(speeds: impl IntoIterator<Item = f64>, threshold: f64) -> u32 {
    let mut last = 0.0f64;
    let mut shifts = 0;
    for v in speeds {
        if v.abs() <= threshold {
            continue;
        }
        if last != 0.0 && v.signum() != last {
            shifts += 1;
        }
        last = v.signum();
    }
    shifts
}

pub const GEAR_THRESHOLD: f64 = 0.01;

/// Scheduler state for one episode at a time.
pub struct Scheduler {
    config: SchedulerConfig,
    rng: ChaCha8Rng,
    pub phase: Phase,
    pub mode: Mode,
    pub pending_rl: Vec<Transition>,
    pub pending_human: Vec<Transition>,
    pub correction_fail: Vec<Transition>,
    pub fix_human: Vec<Transition>,
    pub fix_rl: Vec<Transition>,
    checkpoint: Option<Checkpoint>,
    retries: u32,
    correction_steps: u32,
    episode: u64,
    updates: u64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            config,
            rng,
            phase: Phase::Autonomous,
            mode: Mode::Rl,
            pending_rl: Vec::new(),
            pending_human: Vec::new(),
            correction_fail: Vec::new(),
            fix_human: Vec::new(),
            fix_rl: Vec::new(),
            checkpoint: None,
            retries: 0,
            correction_steps: 0,
            episode: 0,
            updates: 0,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_ref()
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Clears all per-episode state and starts episode `episode`.
    pub fn begin_episode(&mut self, episode: u64, env: &ParkingEnv) -> Result<(), SchedulerError> {
        self.episode = episode;
        self.phase = Phase::Autonomous;
        self.mode = Mode::Rl;
        self.pending_rl.clear();
        self.pending_human.clear();
        self.clear_correction();
        self.correction_fail.clear();
        self.retries = 0;
        self.correction_steps = 0;
        self.checkpoint = None;
        self.set_checkpoint(env)
    }

    fn clear_correction(&mut self) {
        self.fix_human.clear();
        self.fix_rl.clear();
    }

    /// Captures the rollback point from the live environment. Replaces any
    /// earlier checkpoint.
    pub fn set_checkpoint(&mut self, env: &ParkingEnv) -> Result<(), SchedulerError> {
        if self.mode != Mode::Rl {
            return Err(SchedulerError::Lifecycle("checkpoints are taken under rl control"));
        }
        let snapshot = env.snapshot()?;
        self.checkpoint = Some(Checkpoint {
            pose: snapshot.state.pose,
            sim_time: snapshot.state.sim_time,
            obs: snapshot.obs.clone(),
            step_index: snapshot.state.step_index,
            pending_cursor: self.pending_rl.len(),
            snapshot,
        });
        Ok(())
    }

    /// The autonomous segment since the checkpoint, if long enough to correct.
    /// Removes it from the pending buffer.
    pub fn extract_failed_segment(&mut self) -> Option<Vec<Transition>> {
        let cursor = self.checkpoint.as_ref()?.pending_cursor.min(self.pending_rl.len());
        if self.pending_rl.len() - cursor > self.config.n_min {
            Some(self.pending_rl.split_off(cursor))
        } else {
            None
        }
    }

    /// Restores the environment to the checkpoint and enters correction
    /// under human control with empty correction buffers.
    pub fn rollback(&mut self, env: &mut ParkingEnv) -> Result<(), SchedulerError> {
        let cp = self.checkpoint.as_ref().ok_or(SchedulerError::NoCheckpoint)?;
        env.restore(&cp.snapshot)?;
        self.pending_rl.truncate(cp.pending_cursor);
        self.phase = Phase::Correcting;
        self.mode = Mode::HumanCorr;
        self.clear_correction();
        self.correction_steps = 0;
        Ok(())
    }

    /// Applies one operator event.
    pub fn handle_event(
        &mut self,
        event: OperatorEvent,
        env: &mut ParkingEnv,
        notebook: &mut Notebook,
    ) -> Result<(), SchedulerError> {
        use OperatorEvent::*;
        let illegal = SchedulerError::IllegalEvent {
            event,
            phase: self.phase,
            mode: self.mode,
        };
        match (event, self.phase, self.mode) {
            (TakeControl, Phase::Autonomous, Mode::Rl) => self.mode = Mode::Human,
            (TakeControl, Phase::Correcting, Mode::RlCorr) => self.mode = Mode::HumanCorr,
            (ReleaseToRl, Phase::Correcting, Mode::HumanCorr) => self.mode = Mode::RlCorr,
            (HandBack, Phase::Autonomous, Mode::Human) => {
                let human = std::mem::take(&mut self.pending_human);
                notebook.extend_normal(human, NormalKind::Human)?;
                self.mode = Mode::Rl;
                self.set_checkpoint(env)?;
            }
            (Retry, Phase::Correcting | Phase::AwaitingDecision, _) => {
                self.retries += 1;
                self.rollback(env)?;
            }
            (Discard, Phase::Correcting | Phase::AwaitingDecision, _) => {
                self.clear_correction();
                self.correction_fail.clear();
                self.pending_rl.clear();
                self.phase = Phase::AwaitingDecision;
            }
            _ => return Err(illegal),
        }
        Ok(())
    }

    /// Acceptance of a finished correction attempt. On acceptance the region
    /// is committed together with the autonomous prefix before the checkpoint.
    pub fn finalize_correction(
        &mut self,
        final_status: TerminationStatus,
        notebook: &mut Notebook,
    ) -> Result<bool, SchedulerError> {
        if self.phase != Phase::Correcting {
            return Err(SchedulerError::Lifecycle("no correction attempt in progress"));
        }
        let accepted = final_status == TerminationStatus::Arrived
            && !(self.fix_human.is_empty() && self.fix_rl.is_empty());
        if accepted {
            notebook.commit_region(
                self.episode,
                std::mem::take(&mut self.correction_fail),
                std::mem::take(&mut self.fix_human),
                std::mem::take(&mut self.fix_rl),
            )?;
            let prefix = std::mem::take(&mut self.pending_rl);
            notebook.extend_normal(prefix, NormalKind::Rl)?;
        } else {
            self.phase = Phase::AwaitingDecision;
        }
        Ok(accepted)
    }

    fn context<'a>(&self, env: &'a ParkingEnv) -> StepContext<'a> {
        StepContext {
            episode: self.episode,
            phase: self.phase,
            mode: self.mode,
            env,
            retries: self.retries,
            correction_steps: self.correction_steps,
        }
    }

    fn maybe_update(&mut self, agent: &mut dyn Agent, notebook: &Notebook, train: bool) -> Option<LossReport> {
        if !train || notebook.total_len() < self.config.update_after.max(1) {
            return None;
        }
        let batch = notebook.sample_batch(self.config.batch_size, &mut self.rng).ok()?;
        let report = agent.update(&batch)?;
        self.updates += 1;
        Some(report)
    }

    /// Executes one environment step in the current mode and files the
    /// transition into the matching buffer.
    fn step_once(
        &mut self,
        env: &mut ParkingEnv,
        agent: &mut dyn Agent,
        intervenor: &mut dyn Intervenor,
    ) -> Result<(Transition, Action, Option<f64>), SchedulerError> {
        let mode = self.mode;
        let before = env.state().ok_or(SchedulerError::Lifecycle("environment not reset"))?.pose;
        let (raw, mut tr) = if mode.is_human() {
            let ctx = self.context(env);
            let raw = intervenor.human_action(&ctx).clamped(env.vehicle());
            (raw, env.step(raw, mode)?)
        } else {
            let raw = agent.act(env.observation(), self.config.deterministic_policy);
            (raw, env.step(raw, mode)?)
        };
        let mut residual = None;
        if mode.is_human() {
            // Human commands are stored as the action that explains the motion.
            let after = env.state().expect("stepped").pose;
            let ik = inverse_kinematics(&before, &after, env.config().dt, env.vehicle());
            tr.action = ik.action;
            residual = Some(ik.residual);
        }
        match mode {
            Mode::Rl => self.pending_rl.push(tr.clone()),
            Mode::Human => self.pending_human.push(tr.clone()),
            Mode::RlCorr => self.fix_rl.push(tr.clone()),
            Mode::HumanCorr => self.fix_human.push(tr.clone()),
        }
        Ok((tr, raw, residual))
    }

    /// Runs one episode of the correction-in-the-loop procedure on a freshly
    /// reset environment.
    #[allow(clippy::too_many_arguments)]
    pub fn drive_episode(
        &mut self,
        episode: u64,
        env: &mut ParkingEnv,
        agent: &mut dyn Agent,
        intervenor: &mut dyn Intervenor,
        notebook: &mut Notebook,
        train: bool,
        observer: &mut dyn Observer,
    ) -> Result<EpisodeReport, SchedulerError> {
        match env.state() {
            Some(s) if s.step_index == 0 && s.status.is_none() => {}
            _ => return Err(SchedulerError::Lifecycle("drive_episode needs a freshly reset environment")),
        }
        self.begin_episode(episode, env)?;
        let enabled = intervenor.enabled();
        let (rl0, h0, reg0) = (notebook.rl().len(), notebook.human().len(), notebook.regions().len());
        let updates0 = self.updates;
        let mut report = EpisodeReport {
            episode,
            outcome: EpisodeOutcome::Arrived,
            autonomous_status: TerminationStatus::Arrived,
            correction_status: None,
            autonomous_steps: 0,
            correction_steps: 0,
            retries: 0,
            gear_shifts: 0,
            autonomous_return: 0.0,
            rl_added: 0,
            human_added: 0,
            regions_added: 0,
            updates: 0,
            last_loss: None,
            rejected_events: Vec::new(),
        };
        let mut speeds = Vec::new();

        // Autonomous part.
        let terminal = loop {
            if enabled {
                let ctx = self.context(env);
                for ev in intervenor.poll_events(&ctx) {
                    let accepted = self.handle_event(ev, env, notebook).is_ok();
                    if !accepted {
                        report.rejected_events.push((ev, self.phase));
                    }
                    intervenor.on_event(ev, accepted, &self.context(env));
                }
            }
            let (tr, raw, residual) = self.step_once(env, agent, intervenor)?;
            speeds.push(raw.v);
            report.autonomous_steps += 1;
            report.autonomous_return += tr.reward;
            let loss = self.maybe_update(agent, notebook, train);
            report.last_loss = loss.or(report.last_loss);
            observer.on_step(&self.record(env, &tr, raw, loss, residual, notebook));
            if tr.done {
                break tr;
            }
        };
        let status = terminal.status.expect("terminal transitions carry a status");
        report.autonomous_status = status;
        report.gear_shifts = count_gear_shifts(speeds.iter().copied(), GEAR_THRESHOLD);

        if status == TerminationStatus::Arrived {
            notebook.extend_normal(std::mem::take(&mut self.pending_rl), NormalKind::Rl)?;
            notebook.extend_normal(std::mem::take(&mut self.pending_human), NormalKind::Human)?;
            report.outcome = EpisodeOutcome::Arrived;
        } else if !enabled {
            notebook.extend_normal(std::mem::take(&mut self.pending_rl), NormalKind::Rl)?;
            report.outcome = EpisodeOutcome::FailedCommitted;
        } else {
            let autonomous_failure = detect_failure(&terminal) && terminal.mode == Mode::Rl;
            let segment = if autonomous_failure { self.extract_failed_segment() } else { None };
            self.pending_human.clear();
            match segment {
                None => {
                    self.pending_rl.clear();
                    report.outcome = EpisodeOutcome::Failed;
                }
                Some(seg) => {
                    self.correction_fail = seg;
                    self.rollback(env)?;
                    intervenor.on_rollback(&self.context(env));
                    report.outcome =
                        self.run_corrections(env, agent, intervenor, notebook, train, observer, &mut report)?;
                }
            }
        }

        report.retries = self.retries;
        report.rl_added = notebook.rl().len().saturating_sub(rl0);
        report.human_added = notebook.human().len().saturating_sub(h0);
        report.regions_added = notebook.regions().len() - reg0;
        report.updates = self.updates - updates0;
        self.phase = Phase::Autonomous;
        self.mode = Mode::Rl;
        observer.on_episode(&report);
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_corrections(
        &mut self,
        env: &mut ParkingEnv,
        agent: &mut dyn Agent,
        intervenor: &mut dyn Intervenor,
        notebook: &mut Notebook,
        train: bool,
        observer: &mut dyn Observer,
        report: &mut EpisodeReport,
    ) -> Result<EpisodeOutcome, SchedulerError> {
        loop {
            // One correction attempt.
            let mut final_status = None;
            while self.phase == Phase::Correcting {
                let ctx = self.context(env);
                let events = intervenor.poll_events(&ctx);
                let mut restarted = false;
                for ev in events {
                    let accepted = self.handle_event(ev, env, notebook).is_ok();
                    if !accepted {
                        report.rejected_events.push((ev, self.phase));
                    }
                    intervenor.on_event(ev, accepted, &self.context(env));
                    if accepted && ev == OperatorEvent::Retry {
                        restarted = true;
                        intervenor.on_rollback(&self.context(env));
                    }
                    if self.phase != Phase::Correcting {
                        break;
                    }
                }
                if self.phase == Phase::AwaitingDecision {
                    // Discarded mid-attempt.
                    return Ok(EpisodeOutcome::Discarded);
                }
                if restarted {
                    continue;
                }
                let (tr, raw, residual) = self.step_once(env, agent, intervenor)?;
                self.correction_steps += 1;
                report.correction_steps += 1;
                let loss = self.maybe_update(agent, notebook, train);
                report.last_loss = loss.or(report.last_loss);
                observer.on_step(&self.record(env, &tr, raw, loss, residual, notebook));
                if tr.done {
                    final_status = tr.status;
                } else if self.correction_steps >= self.config.correction_t_tol {
                    final_status = Some(TerminationStatus::Timeout);
                }
                if let Some(s) = final_status {
                    report.correction_status = Some(s);
                    if self.finalize_correction(s, notebook)? {
                        return Ok(EpisodeOutcome::Corrected);
                    }
                }
            }

            // Rejected attempt: retry or discard.
            let exhausted = self.config.max_retries.is_some_and(|m| self.retries >= m);
            let decision = if exhausted {
                OperatorEvent::Discard
            } else {
                intervenor.decide(&self.context(env))
            };
            match decision {
                OperatorEvent::Retry => {
                    self.handle_event(OperatorEvent::Retry, env, notebook)?;
                    intervenor.on_rollback(&self.context(env));
                }
                _ => {
                    self.handle_event(OperatorEvent::Discard, env, notebook)?;
                    return Ok(EpisodeOutcome::Discarded);
                }
            }
        }
    }

    fn record(
        &self,
        env: &ParkingEnv,
        tr: &Transition,
        raw: Action,
        loss: Option<LossReport>,
        ik_residual: Option<f64>,
        notebook: &Notebook,
    ) -> StepRecord {
        let st = env.state().expect("stepped");
        StepRecord {
            episode: self.episode,
            step_index: st.step_index,
            pose: st.pose,
            action: raw,
            mode: tr.mode,
            phase: self.phase,
            reward: tr.reward,
            breakdown: tr.breakdown,
            status: tr.status,
            rl_len: notebook.rl().len(),
            human_len: notebook.human().len(),
            regions: notebook.regions().len(),
            retries: self.retries,
            p_normal: notebook.p_normal(),
            loss,
            ik_residual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::{parked_pose, test_env};
    use crate::replay::ReplayConfig;

    /// Replays a fixed action list, then repeats the last action.
    struct Scripted(Vec<Action>, usize);

    impl Agent for Scripted {
        fn act(&mut self, _: &Observation, _: bool) -> Action {
            let a = self.0[self.1.min(self.0.len() - 1)];
            self.1 += 1;
            a
        }
    }

    /// Drives straight at a fixed speed whenever it has control.
    struct Hold(Action);

    impl Agent for Hold {
        fn act(&mut self, _: &Observation, _: bool) -> Action {
            self.0
        }
    }

    fn nb() -> Notebook {
        Notebook::new(ReplayConfig::default())
    }

    #[test]
    fn failure_detection() {
        let mut env = test_env();
        env.reset(0, 1).unwrap();
        let mut t = env.step(Action::ZERO, Mode::Rl).unwrap();
        assert!(!detect_failure(&t));
        t.done = true;
        t.status = Some(TerminationStatus::Collision);
        assert!(detect_failure(&t));
        t.status = Some(TerminationStatus::Arrived);
        assert!(!detect_failure(&t));
    }

    #[test]
    fn checkpoint_cursor_and_replacement() {
        let mut env = test_env();
        env.reset(0, 2).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.begin_episode(0, &env).unwrap();
        assert_eq!(s.checkpoint().unwrap().pending_cursor, 0);
        let mut agent = Hold(Action::new(0.0, 0.2));
        for _ in 0..37 {
            s.step_once(&mut env, &mut agent, &mut NoIntervenor).unwrap();
        }
        s.set_checkpoint(&env).unwrap();
        let cp = s.checkpoint().unwrap();
        assert_eq!((cp.step_index, cp.pending_cursor), (37, 37));
    }

    #[test]
    fn extraction_respects_n_min() {
        let mut env = test_env();
        env.reset(0, 3).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.begin_episode(0, &env).unwrap();
        let mut agent = Hold(Action::new(0.0, 0.1));
        for _ in 0..20 {
            s.step_once(&mut env, &mut agent, &mut NoIntervenor).unwrap();
        }
        s.set_checkpoint(&env).unwrap();
        for _ in 0..4 {
            s.step_once(&mut env, &mut agent, &mut NoIntervenor).unwrap();
        }
        assert!(s.extract_failed_segment().is_none());
        for _ in 0..2 {
            s.step_once(&mut env, &mut agent, &mut NoIntervenor).unwrap();
        }
        assert_eq!(s.extract_failed_segment().unwrap().len(), 6);
        assert_eq!(s.pending_rl.len(), 20);
    }

    #[test]
    fn rollback_restores_checkpoint_and_replays_bitwise() {
        let mut env = test_env();
        env.reset(0, 4).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.begin_episode(0, &env).unwrap();
        let actions: Vec<Action> = (0..30).map(|k| Action::new(0.02 * k as f64 - 0.3, 1.0)).collect();
        let mut first = Vec::new();
        for a in &actions {
            first.push(env.step(*a, Mode::Rl).unwrap());
            if env.is_terminated() {
                break;
            }
        }
        s.rollback(&mut env).unwrap();
        let cp = s.checkpoint().unwrap();
        assert!(env.state().unwrap().pose.bit_eq(&cp.pose));
        assert_eq!(env.state().unwrap().step_index, cp.step_index);
        assert!(env.snapshot().unwrap().bit_eq(&cp.snapshot));
        assert_eq!((s.phase, s.mode), (Phase::Correcting, Mode::HumanCorr));
        for (a, orig) in actions.iter().zip(&first) {
            let again = env.step(*a, Mode::Rl).unwrap();
            assert!(again.bit_eq(orig));
        }
    }

    #[test]
    fn event_legality() {
        let mut env = test_env();
        env.reset(0, 5).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut book = nb();
        s.begin_episode(0, &env).unwrap();
        for ev in [OperatorEvent::ReleaseToRl, OperatorEvent::HandBack, OperatorEvent::Retry, OperatorEvent::Discard] {
            assert!(matches!(
                s.handle_event(ev, &mut env, &mut book),
                Err(SchedulerError::IllegalEvent { phase: Phase::Autonomous, .. })
            ));
        }
        s.handle_event(OperatorEvent::TakeControl, &mut env, &mut book).unwrap();
        assert_eq!(s.mode, Mode::Human);
        assert!(s.handle_event(OperatorEvent::TakeControl, &mut env, &mut book).is_err());
    }

    struct Driver {
        action: Action,
        events: Vec<(u32, OperatorEvent)>,
        decisions: Vec<OperatorEvent>,
        rollbacks: u32,
    }

    impl Intervenor for Driver {
        fn poll_events(&mut self, ctx: &StepContext<'_>) -> Vec<OperatorEvent> {
            let step = ctx.env.state().unwrap().step_index;
            let (now, later): (Vec<_>, Vec<_>) = self.events.drain(..).partition(|(k, _)| *k == step);
            self.events = later;
            now.into_iter().map(|(_, e)| e).collect()
        }
        fn human_action(&mut self, _: &StepContext<'_>) -> Action {
            self.action
        }
        fn on_rollback(&mut self, _: &StepContext<'_>) {
            self.rollbacks += 1;
        }
        fn decide(&mut self, _: &StepContext<'_>) -> OperatorEvent {
            if self.decisions.is_empty() {
                OperatorEvent::Discard
            } else {
                self.decisions.remove(0)
            }
        }
    }

    #[test]
    fn hand_back_commits_human_segment() {
        let mut env = test_env();
        env.reset(0, 6).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut book = nb();
        let mut driver = Driver {
            action: Action::new(0.1, 0.3),
            events: vec![(3, OperatorEvent::TakeControl), (18, OperatorEvent::HandBack)],
            decisions: vec![],
            rollbacks: 0,
        };
        // The agent stands still so the episode times out.
        let mut agent = Hold(Action::ZERO);
        let r = s
            .drive_episode(0, &mut env, &mut agent, &mut driver, &mut book, false, &mut ())
            .unwrap();
        assert_eq!(book.human().len(), 15);
        assert!(book.human().iter().all(|t| t.mode == Mode::Human));
        assert_eq!(r.autonomous_status, TerminationStatus::Timeout);
        // The stalled segment after hand-back is long enough, so a correction
        // runs; the driver's correction does not park and is discarded.
        assert_eq!(r.outcome, EpisodeOutcome::Discarded);
        assert_eq!(s.checkpoint().unwrap().step_index, 18);
        assert_eq!(driver.rollbacks, 1);
        assert!(book.rl().is_empty());
    }

    #[test]
    fn successful_autonomous_episode_commits_pending() {
        let mut env = test_env();
        let start = parked_pose(&env);
        // One step outside the slot, then reverse in.
        let pose = Pose2D::new(start.x, start.y + 0.6, start.psi);
        env.reset_to_pose(0, pose, 0).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut book = nb();
        let mut agent = Hold(Action::new(0.0, -1.5));
        let r = s
            .drive_episode(0, &mut env, &mut agent, &mut NoIntervenor, &mut book, false, &mut ())
            .unwrap();
        assert_eq!(r.outcome, EpisodeOutcome::Arrived);
        assert_eq!(book.rl().len(), r.autonomous_steps as usize);
        assert!(book.regions().is_empty());
    }

    #[test]
    fn correction_accept_reject_and_retry() {
        let mut env = test_env();
        let parked = parked_pose(&env);
        let start = Pose2D::new(parked.x, parked.y + 1.5, parked.psi);
        env.reset_to_pose(0, start, 0).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut book = nb();
        // The agent drives away north until out of bounds or timeout; the
        // human reverses into the slot, but only on the second attempt.
        let mut agent = Scripted(vec![Action::new(0.0, 1.5)], 0);
        struct SecondTry(u32);
        impl Intervenor for SecondTry {
            fn poll_events(&mut self, _: &StepContext<'_>) -> Vec<OperatorEvent> {
                Vec::new()
            }
            fn human_action(&mut self, _: &StepContext<'_>) -> Action {
                if self.0 >= 2 {
                    Action::new(0.0, -1.5)
                } else {
                    Action::new(0.6, 1.5)
                }
            }
            fn on_rollback(&mut self, _: &StepContext<'_>) {
                self.0 += 1;
            }
            fn decide(&mut self, _: &StepContext<'_>) -> OperatorEvent {
                OperatorEvent::Retry
            }
        }
        let mut iv = SecondTry(0);
        let r = s
            .drive_episode(7, &mut env, &mut agent, &mut iv, &mut book, false, &mut ())
            .unwrap();
        assert_ne!(r.autonomous_status, TerminationStatus::Arrived);
        assert_eq!(r.outcome, EpisodeOutcome::Corrected);
        assert_eq!(r.retries, 1);
        assert_eq!(book.regions().len(), 1);
        let region = &book.regions()[0];
        assert_eq!(region.episode, 7);
        assert_eq!(region.fail_rl.len(), r.autonomous_steps as usize);
        assert!(region.fix_human.iter().all(|t| t.mode == Mode::HumanCorr));
        assert!(region.fix_rl.is_empty());
        assert!(region.is_valid());
        // Human actions were recovered by inverse kinematics.
        assert!(region.fix_human.iter().all(|t| (t.action.v + 1.5).abs() < 1e-9));
    }

    #[test]
    fn finalize_rules() {
        let mut env = test_env();
        env.reset(0, 8).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut book = nb();
        s.begin_episode(3, &env).unwrap();
        let mut agent = Hold(Action::new(0.0, 0.5));
        for _ in 0..10 {
            s.step_once(&mut env, &mut agent, &mut NoIntervenor).unwrap();
        }
        s.correction_fail = s.extract_failed_segment().unwrap();
        s.rollback(&mut env).unwrap();
        assert!(!s.finalize_correction(TerminationStatus::Arrived, &mut book).unwrap());
        assert_eq!(s.phase, Phase::AwaitingDecision);
        s.handle_event(OperatorEvent::Retry, &mut env, &mut book).unwrap();
        let mut human = Driver {
            action: Action::new(0.0, 0.5),
            events: vec![],
            decisions: vec![],
            rollbacks: 0,
        };
        for _ in 0..20 {
            s.step_once(&mut env, &mut agent, &mut human).unwrap();
        }
        assert!(!s.finalize_correction(TerminationStatus::Collision, &mut book).unwrap());
        s.handle_event(OperatorEvent::Retry, &mut env, &mut book).unwrap();
        assert!(s.fix_human.is_empty());
        s.handle_event(OperatorEvent::ReleaseToRl, &mut env, &mut book).unwrap();
        for _ in 0..20 {
            s.step_once(&mut env, &mut agent, &mut human).unwrap();
        }
        assert!(s.fix_rl.iter().all(|t| t.mode == Mode::RlCorr));
        assert!(s.finalize_correction(TerminationStatus::Arrived, &mut book).unwrap());
        assert_eq!(book.regions()[0].fix_rl.len(), 20);
    }

    #[test]
    fn disabled_intervenor_keeps_failures_as_normal_data() {
        let mut env = test_env();
        env.reset(0, 9).unwrap();
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut book = nb();
        let mut agent = Hold(Action::ZERO);
        let r = s
            .drive_episode(0, &mut env, &mut agent, &mut NoIntervenor, &mut book, false, &mut ())
            .unwrap();
        assert_eq!(r.outcome, EpisodeOutcome::FailedCommitted);
        assert_eq!(book.rl().len(), 121);
        assert!(book.regions().is_empty());
    }

    #[test]
    fn gear_shift_counting() {
        assert_eq!(count_gear_shifts([1.0, 1.0, -1.0, 0.0, -0.5, 0.005, 1.0], 0.01), 2);
        assert_eq!(count_gear_shifts([0.0, 0.0], 0.01), 0);
        assert_eq!(count_gear_shifts([-1.0, 0.001, -1.0], 0.01), 0);
    }
}
