//! `parkcil` command line: train, evaluate, serve operator sessions and
//! inspect artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use parkcil_core::replay::Notebook;
use parkcil_harness::config::{IntervenorMode, TrainConfig};
use parkcil_harness::eval::{run_evaluation, DEFAULT_TRIALS};
use parkcil_harness::scenario::Scenario;
use parkcil_harness::session::{serve_session, SessionConfig};
use parkcil_harness::train::{load_learner, run_training, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "parkcil", version, about = "Correction-in-the-loop parking workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate trained parameters with mean actions.
    Eval(EvalArgs),
    /// Train with a human operator connected over a websocket.
    Serve(ServeArgs),
    /// Summarize a saved replay notebook.
    ReplayDump(ReplayDumpArgs),
    /// Validate a scenario file and print its canonical form.
    ScenarioCheck(ScenarioCheckArgs),
}

/// Overrides for fields of the training config file.
#[derive(Args, Clone, Debug, Default)]
struct TrainOverrides {
    /// TOML training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario name or scenario file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    max_env_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    update_after: Option<usize>,
    #[arg(long)]
    random_steps: Option<u64>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    correction_t_tol: Option<u32>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long, value_enum)]
    intervenor: Option<IntervenorMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Relative paths resolve against $PARKCIL_OUTPUT_ROOT when set.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    step_log_every: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_ae: Option<f64>,
    #[arg(long)]
    t_tol: Option<u32>,
    /// Restrict training to these slot indices.
    #[arg(long, value_delimiter = ',')]
    slots: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Evaluate the final policy on this many trials (0 skips).
    #[arg(long, default_value_t = 0)]
    eval_trials: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter checkpoint (.pcpr).
    #[arg(long)]
    params: PathBuf,
    /// Training config the parameters were produced with; defaults to the
    /// config.toml next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    slots: Option<Vec<usize>>,
    /// Print per-trial records as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, default_value = "127.0.0.1:8765")]
    bind: String,
    /// Wall-clock duration of one step; 0 runs as fast as possible.
    #[arg(long, default_value_t = 100)]
    step_period_ms: u64,
    /// Discard a correction after the operator has been gone this long.
    #[arg(long, default_value_t = 120)]
    disconnect_timeout_s: u64,
}

#[derive(Args)]
struct ReplayDumpArgs {
    path: PathBuf,
    /// List every correction region.
    #[arg(long)]
    regions: bool,
}

#[derive(Args)]
struct ScenarioCheckArgs {
    /// Built-in name or file.
    scenario: String,
    /// Write the canonical form here.
    #[arg(long)]
    write: Option<PathBuf>,
}

fn output_root(dir: &Path) -> PathBuf {
    match std::env::var_os("PARKCIL_OUTPUT_ROOT") {
        Some(root) if dir.is_relative() => Path::new(&root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn build_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ <- $value:expr) => {
            if let Some(v) = $value.clone() {
                c.$($field).+ = v;
            }
        };
    }
    set!(scenario <- o.scenario);
    set!(episodes <- o.episodes);
    set!(batch_size <- o.batch_size);
    set!(update_after <- o.update_after);
    set!(random_steps <- o.random_steps);
    set!(n_min <- o.n_min);
    set!(correction_t_tol <- o.correction_t_tol);
    set!(intervenor <- o.intervenor);
    set!(seed <- o.seed);
    set!(output_dir <- o.output_dir);
    set!(checkpoint_every <- o.checkpoint_every);
    set!(step_log_every <- o.step_log_every);
    set!(learner.hidden <- o.hidden);
    set!(learner.lr <- o.lr);
    set!(learner.gamma <- o.gamma);
    set!(learner.tau <- o.tau);
    set!(learner.lambda_ae <- o.lambda_ae);
    set!(env.t_tol <- o.t_tol);
    set!(slots <- o.slots);
    if o.max_env_steps.is_some() {
        c.max_env_steps = o.max_env_steps;
    }
    if o.max_retries.is_some() {
        c.max_retries = o.max_retries;
    }
    c.output_dir = output_root(&c.output_dir);
    c.validate()?;
    Ok(c)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = build_config(&args.overrides)?;
    if cfg.intervenor == IntervenorMode::Interactive {
        bail!("interactive training needs an operator; use `parkcil serve`");
    }
    log::info!("training on {} into {}", cfg.scenario, cfg.output_dir.display());
    let summary = run_training(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if args.eval_trials > 0 {
        let scenario = Scenario::resolve(&cfg.scenario)?;
        let mut learner = load_learner(&cfg, &scenario, &cfg.output_dir.join(parkcil_harness::train::FINAL_PARAMS_FILE))?;
        let m = run_evaluation(&scenario, cfg.env, cfg.reward, &mut learner, args.eval_trials, &cfg.slots, cfg.seed ^ 0xE7A1)?;
        print_metrics(&m);
    }
    Ok(())
}

fn print_metrics(m: &parkcil_harness::EvalMetrics) {
    println!(
        "trials {}  PSR {:.1}%  PCR {:.1}%  PTR {:.1}%  PBR {:.1}%  NGS {:.2}",
        m.trials, m.psr, m.pcr, m.ptr, m.pbr, m.ngs
    );
}

fn eval(args: EvalArgs) -> Result<()> {
    let config_path = match &args.config {
        Some(p) => Some(p.clone()),
        None => args
            .params
            .ancestors()
            .skip(1)
            .take(2)
            .map(|d| d.join(CONFIG_FILE))
            .find(|p| p.exists()),
    };
    let mut cfg = match config_path {
        Some(p) => TrainConfig::load(&p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = &args.scenario {
        cfg.scenario = s.clone();
    }
    let scenario = Scenario::resolve(&cfg.scenario)?;
    let mut learner = load_learner(&cfg, &scenario, &args.params)
        .with_context(|| format!("loading {}", args.params.display()))?;
    let slots = args.slots.unwrap_or_default();
    let m = run_evaluation(&scenario, cfg.env, cfg.reward, &mut learner, args.trials, &slots, args.seed)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&m)?);
    } else {
        print_metrics(&m);
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = build_config(&args.overrides)?;
    cfg.intervenor = IntervenorMode::Interactive;
    let session = SessionConfig {
        bind: args.bind,
        step_period_ms: args.step_period_ms,
        disconnect_timeout_s: args.disconnect_timeout_s as f64,
    };
    let summary = serve_session(&cfg, &session)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn replay_dump(args: ReplayDumpArgs) -> Result<()> {
    let nb = Notebook::load(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    println!("rl transitions     {}", nb.rl().len());
    println!("human transitions  {}", nb.human().len());
    println!("correction regions {}", nb.regions().len());
    println!("P(normal)          {:.4}", nb.p_normal());
    if args.regions {
        for r in nb.regions() {
            println!(
                "  episode {:>6}: fail {:>4}  fix_rl {:>4}  fix_human {:>4}",
                r.episode,
                r.fail_rl.len(),
                r.fix_rl.len(),
                r.fix_human.len()
            );
        }
    }
    Ok(())
}

fn scenario_check(args: ScenarioCheckArgs) -> Result<()> {
    let s = Scenario::resolve(&args.scenario)?;
    eprintln!(
        "{}: {} slots, {} obstacles, grid {}x{} at {} m",
        s.spec.name,
        s.scene.slots.len(),
        s.scene.obstacles.len(),
        s.scene.occupancy.width,
        s.scene.occupancy.height,
        s.spec.grid_resolution_m
    );
    match args.write {
        Some(p) => s.save(&p)?,
        None => print!("{}", s.to_toml()),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::ReplayDump(a) => replay_dump(a),
        Command::ScenarioCheck(a) => scenario_check(a),
    }
}
