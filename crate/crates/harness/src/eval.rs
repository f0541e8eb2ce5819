//! Policy evaluation with mean actions.

use parkcil_core::env::{EnvConfig, Mode, ParkingEnv, RewardParams};
use parkcil_core::scheduler::{count_gear_shifts, Agent, GEAR_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::{EvalMetrics, TrialRecord};
use crate::scenario::Scenario;
use crate::HarnessError;

/// Default trial count of a full evaluation.
pub const DEFAULT_TRIALS: usize = 200;

/// Runs `trials` episodes from the standard start-pose sampler, acting with
/// the policy's deterministic action. Slots are drawn uniformly from `slots`
/// (all slots when empty). The same `seed` gives the same start poses.
pub fn run_evaluation(
    scenario: &Scenario,
    env_config: EnvConfig,
    reward: RewardParams,
    policy: &mut dyn Agent,
    trials: usize,
    slots: &[usize],
    seed: u64,
) -> Result<EvalMetrics, HarnessError> {
    let all: Vec<usize> = (0..scenario.scene.slots.len()).collect();
    let slots = if slots.is_empty() { &all[..] } else { slots };
    let mut env = ParkingEnv::new(scenario.scene.clone(), scenario.vehicle, env_config, reward);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trials);
    for _ in 0..trials {
        let slot = slots[rng.random_range(0..slots.len())];
        let trial_seed: u64 = rng.random();
        env.reset(slot, trial_seed)?;
        let mut speeds = Vec::new();
        let mut ret = 0.0;
        let (status, steps) = loop {
            let a = policy.act(env.observation(), true);
            let t = env.step(a, Mode::Rl)?;
            speeds.push(t.action.v);
            ret += t.reward;
            if let Some(s) = t.status {
                break (s, env.state().expect("stepped").step_index);
            }
        };
        records.push(TrialRecord {
            slot,
            seed: trial_seed,
            status,
            steps,
            gear_shifts: count_gear_shifts(speeds, GEAR_THRESHOLD),
            episode_return: ret,
        });
    }
    Ok(EvalMetrics::from_records(records))
}
