//! Training driver: the outer episode loop around the scheduler.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use parkcil_core::env::{Observation, ParkingEnv, Transition};
use parkcil_core::learner::{LossReport, SacLearner};
use parkcil_core::replay::Notebook;
use parkcil_core::scheduler::{
    Agent, EpisodeOutcome, EpisodeReport, Intervenor, NoIntervenor, Observer, Scheduler, StepRecord,
};
use parkcil_core::vehicle::{Action, VehicleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{IntervenorMode, TrainConfig};
use crate::corrector::ScriptedCorrector;
use crate::scenario::Scenario;
use crate::stats::{EpisodeStats, LossStats, StatsRecord, StatsWriter, StepStats};
use crate::HarnessError;

pub const STATS_FILE: &str = "stats.jsonl";
pub const NOTEBOOK_FILE: &str = "notebook.pcnb";
pub const FINAL_PARAMS_FILE: &str = "params_final.pcpr";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// The learner, preceded by a warm-up of uniformly random actions.
pub struct TrainAgent {
    pub learner: SacLearner,
    vehicle: VehicleParams,
    random_left: u64,
    rng: ChaCha8Rng,
}

impl TrainAgent {
    pub fn new(learner: SacLearner, vehicle: VehicleParams, random_steps: u64, seed: u64) -> Self {
        Self {
            learner,
            vehicle,
            random_left: random_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for TrainAgent {
    fn act(&mut self, obs: &Observation, deterministic: bool) -> Action {
        if self.random_left > 0 {
            self.random_left -= 1;
            let n = [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)];
            return Action::from_normalized(n, &self.vehicle);
        }
        self.learner.act(obs, deterministic)
    }

    fn update(&mut self, batch: &[&Transition]) -> Option<LossReport> {
        Agent::update(&mut self.learner, batch)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub arrived: u64,
    pub failed: u64,
    pub failed_committed: u64,
    pub corrected: u64,
    pub discarded: u64,
}

impl OutcomeCounts {
    fn add(&mut self, o: EpisodeOutcome) {
        match o {
            EpisodeOutcome::Arrived => self.arrived += 1,
            EpisodeOutcome::Failed => self.failed += 1,
            EpisodeOutcome::FailedCommitted => self.failed_committed += 1,
            EpisodeOutcome::Corrected => self.corrected += 1,
            EpisodeOutcome::Discarded => self.discarded += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub outcomes: OutcomeCounts,
    pub rl_len: usize,
    pub human_len: usize,
    pub regions: usize,
    pub alpha: f64,
    pub corrector_plans: u64,
    pub corrector_infeasible: u64,
    pub output_dir: PathBuf,
    /// True when the run stopped on request before its budget.
    pub interrupted: bool,
}

/// Fans one step or episode event out to the stats log and an extra observer.
struct StatsObserver<'a> {
    writer: &'a mut StatsWriter,
    every: u64,
    env_steps: u64,
    io_error: Option<std::io::Error>,
    extra: &'a mut dyn Observer,
}

impl Observer for StatsObserver<'_> {
    fn on_step(&mut self, r: &StepRecord) {
        self.env_steps += 1;
        if self.every > 0 && self.env_steps.is_multiple_of(self.every) {
            let rec = StatsRecord::Step(StepStats {
                episode: r.episode,
                step_index: r.step_index,
                env_steps: self.env_steps,
                mode: r.mode,
                phase: r.phase,
                reward: r.reward,
                loss: r.loss.as_ref().map(LossStats::from),
                rl_len: r.rl_len,
                human_len: r.human_len,
                regions: r.regions,
                p_normal: r.p_normal,
            });
            if let Err(e) = self.writer.write(&rec) {
                self.io_error.get_or_insert(e);
            }
        }
        self.extra.on_step(r);
    }

    fn on_episode(&mut self, report: &EpisodeReport) {
        self.extra.on_episode(report);
    }
}

fn episode_stats(
    report: &EpisodeReport,
    slot: usize,
    env_steps: u64,
    notebook: &Notebook,
    learner: &SacLearner,
) -> EpisodeStats {
    EpisodeStats {
        episode: report.episode,
        slot,
        outcome: report.outcome,
        status: report.autonomous_status,
        correction_status: report.correction_status,
        steps: report.autonomous_steps,
        correction_steps: report.correction_steps,
        retries: report.retries,
        gear_shifts: report.gear_shifts,
        episode_return: report.autonomous_return,
        env_steps,
        updates: report.updates,
        rl_added: report.rl_added,
        human_added: report.human_added,
        regions_committed: report.regions_added,
        rl_len: notebook.rl().len(),
        human_len: notebook.human().len(),
        regions: notebook.regions().len(),
        p_normal: notebook.p_normal(),
        alpha: learner.alpha(),
        loss: report.last_loss.as_ref().map(LossStats::from),
    }
}

/// Per-run seeds derived from the configured seed.
fn split_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Trains with the intervenor named in the config. Interactive mode needs a
/// live session; use [`crate::session::serve_session`] for that.
pub fn run_training(config: &TrainConfig) -> Result<TrainSummary, HarnessError> {
    config.validate()?;
    let scenario = Scenario::resolve(&config.scenario)?;
    let stop = AtomicBool::new(false);
    match config.intervenor {
        IntervenorMode::None => run_training_with(config, &scenario, &mut NoIntervenor, &mut (), &stop),
        IntervenorMode::Scripted => {
            let mut c = ScriptedCorrector::new(config.corrector.clone(), config.correction_t_tol);
            let mut summary = run_training_with(config, &scenario, &mut c, &mut (), &stop)?;
            summary.corrector_plans = c.planned;
            summary.corrector_infeasible = c.infeasible_count;
            std::fs::write(config.output_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
            Ok(summary)
        }
        IntervenorMode::Interactive => Err(HarnessError::Config(
            "interactive training runs through the session server (`serve`)".into(),
        )),
    }
}

/// Training loop with a caller-supplied intervenor and observer. Stops
/// between episodes once `stop` is set.
pub fn run_training_with(
    config: &TrainConfig,
    scenario: &Scenario,
    intervenor: &mut dyn Intervenor,
    observer: &mut dyn Observer,
    stop: &AtomicBool,
) -> Result<TrainSummary, HarnessError> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    std::fs::write(out.join(CONFIG_FILE), config.to_toml())?;

    let slots: Vec<usize> = if config.slots.is_empty() {
        (0..scenario.scene.slots.len()).collect()
    } else {
        config.slots.clone()
    };
    if let Some(&bad) = slots.iter().find(|&&s| s >= scenario.scene.slots.len()) {
        return Err(HarnessError::Config(format!(
            "slot {bad} out of range ({} slots)",
            scenario.scene.slots.len()
        )));
    }

    let mut learner_cfg = config.learner.clone();
    learner_cfg.action_scale = [scenario.vehicle.max_steer, scenario.vehicle.max_speed];
    let learner = SacLearner::new(learner_cfg, split_seed(config.seed, 1))?;
    let mut agent = TrainAgent::new(learner, scenario.vehicle, config.random_steps, split_seed(config.seed, 2));
    let mut env = ParkingEnv::new(scenario.scene.clone(), scenario.vehicle, config.env, config.reward);
    let mut notebook = Notebook::new(config.replay);
    let mut sched_cfg = config.scheduler();
    sched_cfg.seed = split_seed(config.seed, 3);
    let mut scheduler = Scheduler::new(sched_cfg);
    let mut episode_rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 4));
    let mut writer = StatsWriter::create(&out.join(STATS_FILE))?;

    let mut summary = TrainSummary {
        episodes: 0,
        env_steps: 0,
        updates: 0,
        outcomes: OutcomeCounts::default(),
        rl_len: 0,
        human_len: 0,
        regions: 0,
        alpha: agent.learner.alpha(),
        corrector_plans: 0,
        corrector_infeasible: 0,
        output_dir: out.clone(),
        interrupted: false,
    };
    let mut env_steps = 0u64;
    for episode in 0..config.episodes {
        if stop.load(Ordering::SeqCst) {
            summary.interrupted = true;
            break;
        }
        if config.max_env_steps.is_some_and(|m| env_steps >= m) {
            break;
        }
        let slot = slots[episode_rng.random_range(0..slots.len())];
        let reset_seed: u64 = episode_rng.random();
        env.reset(slot, reset_seed)?;
        let mut obs = StatsObserver {
            writer: &mut writer,
            every: config.step_log_every,
            env_steps,
            io_error: None,
            extra: observer,
        };
        let report = scheduler.drive_episode(episode, &mut env, &mut agent, intervenor, &mut notebook, true, &mut obs)?;
        env_steps = obs.env_steps;
        if let Some(e) = obs.io_error {
            return Err(e.into());
        }
        writer.write(&StatsRecord::Episode(episode_stats(
            &report,
            slot,
            env_steps,
            &notebook,
            &agent.learner,
        )))?;
        summary.outcomes.add(report.outcome);
        summary.episodes += 1;
        log::debug!(
            "episode {episode}: {:?} ({}) after {} steps, {} env steps total",
            report.outcome,
            report.autonomous_status.as_str(),
            report.autonomous_steps + report.correction_steps,
            env_steps
        );
        if config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0 {
            agent
                .learner
                .save_params(&checkpoint_path(out, episode + 1))?;
        }
    }
    writer.flush()?;
    agent.learner.save_params(&out.join(FINAL_PARAMS_FILE))?;
    notebook.save(&out.join(NOTEBOOK_FILE))?;

    summary.env_steps = env_steps;
    summary.updates = scheduler.updates();
    summary.rl_len = notebook.rl().len();
    summary.human_len = notebook.human().len();
    summary.regions = notebook.regions().len();
    summary.alpha = agent.learner.alpha();
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn checkpoint_path(out: &Path, episodes: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("params_ep{episodes:06}.pcpr"))
}

/// A learner shaped by `config` with parameters loaded from `path`.
pub fn load_learner(config: &TrainConfig, scenario: &Scenario, path: &Path) -> Result<SacLearner, HarnessError> {
    let mut cfg = config.learner.clone();
    cfg.action_scale = [scenario.vehicle.max_steer, scenario.vehicle.max_speed];
    let mut learner = SacLearner::new(cfg, 0)?;
    learner.load_params(path)?;
    Ok(learner)
}
