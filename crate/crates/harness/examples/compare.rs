//! Trains with and without the scripted corrector on the same budget and
//! prints evaluation metrics for each run.
//!
//! `cargo run --release -p parkcil-harness --example compare -- <steps> <seeds> <trials>`

use std::time::Instant;

use parkcil_harness::config::{IntervenorMode, TrainConfig};
use parkcil_harness::eval::run_evaluation;
use parkcil_harness::scenario::Scenario;
use parkcil_harness::train::{load_learner, run_training, FINAL_PARAMS_FILE};

fn main() -> anyhow::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let steps = args.first().copied().unwrap_or(50_000);
    let seeds = args.get(1).copied().unwrap_or(3);
    let trials = args.get(2).copied().unwrap_or(50) as usize;
    let scenario = Scenario::builtin("open-lot")?;
    let root = std::env::temp_dir().join("parkcil-compare");
    for mode in [IntervenorMode::Scripted, IntervenorMode::None] {
        let mut psr = 0.0;
        for seed in 0..seeds {
            let cfg = TrainConfig {
                episodes: u64::MAX,
                max_env_steps: Some(steps),
                intervenor: mode,
                seed,
                output_dir: root.join(format!("{mode:?}-{seed}")),
                checkpoint_every: 0,
                step_log_every: 0,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let s = run_training(&cfg)?;
            let mut learner = load_learner(&cfg, &scenario, &cfg.output_dir.join(FINAL_PARAMS_FILE))?;
            let m = run_evaluation(&scenario, cfg.env, cfg.reward, &mut learner, trials, &[], 0xE7A1)?;
            psr += m.psr;
            println!(
                "{mode:?} seed {seed}: PSR {:.1} PCR {:.1} PTR {:.1} PBR {:.1} NGS {:.2} | {} episodes {:?} regions {} plans {}/{} infeasible | {:.0}s",
                m.psr, m.pcr, m.ptr, m.pbr, m.ngs, s.episodes, s.outcomes, s.regions, s.corrector_plans, s.corrector_infeasible,
                t0.elapsed().as_secs_f64()
            );
        }
        println!("{mode:?} mean PSR {:.1}", psr / seeds as f64);
    }
    Ok(())
}
