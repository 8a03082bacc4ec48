//! Command-line entry point: run rule-based dispatchers, train and
//! evaluate the PPO policy, and sweep fleet sizes.
//!
//! Exit codes: 0 success, 2 usage, 3 scenario/config, 4 checkpoint
//! incompatibility. The `MINE_DISPATCH_LOG` environment variable
//! (`error`, `info`, `debug`) controls log verbosity on stderr. Output
//! files contain no timestamps or wall-clock data, so identical flags
//! and seeds produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dispatchers::DispatcherKind;
use crate::policy;
use crate::reward::{RewardConfig, RewardMode};
use crate::scenario::{default_scenario, load_scenario, ScenarioConfig};
use crate::sim::EpisodeMetrics;
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SCENARIO: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Parser)]
#[command(
    name = "mine-dispatch",
    about = "Open-pit mine truck dispatch simulator and PPO trainer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rule-based dispatcher for one or more episodes.
    Run(RunArgs),
    /// Train the PPO policy.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Compare dispatchers across fleet sizes.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file; the built-in default scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    dispatcher: DispatcherKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Episodes to run; episode i uses seed + i.
    #[arg(long, default_value_t = 1)]
    episodes: u64,
    /// CSV output path; stdout summary only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a per-decision trace CSV next to the metrics.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "dense")]
    reward: RewardMode,
    /// Teacher guidance on or off.
    #[arg(long, default_value = "off")]
    guide: OnOff,
    /// Total environment decisions to train for.
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory for metrics.csv and checkpoint.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    episodes: u64,
    /// Comma-separated episode seeds; defaults to 0..episodes.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Checkpoint for the "ppo" dispatcher entry; rule-based entries
    /// need none.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long = "fleet-min")]
    fleet_min: usize,
    #[arg(long = "fleet-max")]
    fleet_max: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
    /// Comma-separated dispatcher names, plus "ppo" for the checkpoint.
    #[arg(long, value_delimiter = ',', default_value = "sptf,shortest_queue,naive")]
    dispatchers: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One episode's result as reported by `run` and `eval`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub dispatcher: String,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
    /// Wall clock; logged, never written to output files.
    pub runtime_seconds: f64,
}

fn load_or_default(path: &Option<PathBuf>) -> Result<(ScenarioConfig, String), i32> {
    match path {
        None => Ok((default_scenario(), "default".to_string())),
        Some(p) => match load_scenario(p) {
            Ok(c) => Ok((c, p.display().to_string())),
            Err(e) => {
                eprintln!("error: scenario {}: {e}", p.display());
                Err(EXIT_SCENARIO)
            }
        },
    }
}

fn write_out(path: &Path, contents: &str) -> Result<(), i32> {
    std::fs::write(path, contents).map_err(|e| {
        eprintln!("error: writing {}: {e}", path.display());
        EXIT_SCENARIO
    })
}

const METRICS_COLUMNS: &str =
    "scenario,dispatcher,seed,episode,produced_tons,match_factor,total_wait_time,jam_ratio,trips_completed";

fn metrics_rows(reports: &[RunReport]) -> String {
    let mut csv = String::new();
    let _ = writeln!(csv, "{METRICS_COLUMNS}");
    for (i, r) in reports.iter().enumerate() {
        let m = &r.metrics;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.dispatcher,
            r.seed,
            i,
            m.produced_tons,
            m.match_factor,
            m.total_wait_time,
            m.jam_ratio,
            m.trips_completed
        );
    }
    // Summary row with means over episodes.
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| {
        reports.iter().map(|r| f(&r.metrics)).sum::<f64>() / n
    };
    let _ = writeln!(
        csv,
        "{},{},{},summary,{},{},{},{},{}",
        reports[0].scenario,
        reports[0].dispatcher,
        reports[0].seed,
        mean(&|m| m.produced_tons),
        mean(&|m| m.match_factor),
        mean(&|m| m.total_wait_time),
        mean(&|m| m.jam_ratio),
        mean(&|m| m.trips_completed as f64),
    );
    csv
}

fn print_summary(reports: &[RunReport]) {
    let n = reports.len() as f64;
    let tons = reports.iter().map(|r| r.metrics.produced_tons).sum::<f64>() / n;
    let mf = reports.iter().map(|r| r.metrics.match_factor).sum::<f64>() / n;
    let wait = reports.iter().map(|r| r.metrics.total_wait_time).sum::<f64>() / n;
    let jam = reports.iter().map(|r| r.metrics.jam_ratio).sum::<f64>() / n;
    println!(
        "{}: episodes {} produced_tons {tons:.2} match_factor {mf:.2} total_wait_time {wait:.2} jam_ratio {jam:.2}",
        reports[0].dispatcher,
        reports.len()
    );
}

fn cmd_run(args: &RunArgs) -> i32 {
    let (scenario, scenario_id) = match load_or_default(&args.scenario) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let mut reports = Vec::new();
    let mut trace = String::new();
    for i in 0..args.episodes.max(1) {
        let seed = args.seed + i;
        let started = Instant::now();
        let metrics = if args.trace.is_some() {
            let (m, t) = run_traced(&scenario, args.dispatcher, seed);
            trace.push_str(&t);
            m
        } else {
            trainer::run_dispatcher_episode(&scenario, args.dispatcher, seed)
        };
        reports.push(RunReport {
            scenario: scenario_id.clone(),
            dispatcher: args.dispatcher.name().to_string(),
            seed,
            metrics,
            runtime_seconds: started.elapsed().as_secs_f64(),
        });
    }
    log::info!(
        "total runtime {:.3}s",
        reports.iter().map(|r| r.runtime_seconds).sum::<f64>()
    );
    if let Some(path) = &args.trace {
        if let Err(code) = write_out(path, &trace) {
            return code;
        }
    }
    if let Some(path) = &args.out {
        if let Err(code) = write_out(path, &metrics_rows(&reports)) {
            return code;
        }
    }
    print_summary(&reports);
    EXIT_OK
}

fn run_traced(
    scenario: &ScenarioConfig,
    kind: DispatcherKind,
    seed: u64,
) -> (EpisodeMetrics, String) {
    use crate::sim::{reset, StepOutcome};
    let (mut state, first) = reset(scenario, seed);
    state.enable_trace();
    let mut dispatcher = crate::dispatchers::Dispatcher::new(kind, scenario, seed);
    let mut pending = Some(first);
    while let Some(request) = pending {
        let action = dispatcher.decide(&state, &request);
        pending = match state.step(action).expect("dispatcher actions are legal").0 {
            StepOutcome::Request(r) => Some(r),
            StepOutcome::EpisodeEnd => None,
        };
    }
    let metrics = state.compute_metrics().expect("episode finished");
    let trace = state.trace_csv();
    (metrics, trace)
}

fn cmd_train(args: &TrainArgs) -> i32 {
    let (scenario, _) = match load_or_default(&args.scenario) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let reward = RewardConfig::for_mode(args.reward);
    let config = TrainConfig::default();
    let guided = matches!(args.guide, OnOff::On);
    let started = Instant::now();
    match trainer::train(
        &scenario,
        &reward,
        &config,
        guided,
        args.steps,
        args.seed,
        args.workers,
        &args.out,
    ) {
        Ok(report) => {
            log::info!("training runtime {:.3}s", started.elapsed().as_secs_f64());
            println!(
                "trained {} steps ({} episodes); checkpoint {} metrics {}",
                report.steps,
                report.episodes,
                report.checkpoint_path.display(),
                report.metrics_path.display()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: training: {e}");
            EXIT_SCENARIO
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> i32 {
    let (scenario, scenario_id) = match load_or_default(&args.scenario) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let params = match policy::load_checkpoint(&args.checkpoint) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: checkpoint {}: {e}", args.checkpoint.display());
            return EXIT_CHECKPOINT;
        }
    };
    let seeds: Vec<u64> = match &args.seeds {
        Some(s) => {
            if s.len() as u64 != args.episodes && args.episodes != 1 {
                eprintln!(
                    "error: --seeds lists {} seeds but --episodes is {}",
                    s.len(),
                    args.episodes
                );
                return EXIT_USAGE;
            }
            s.clone()
        }
        None => (0..args.episodes).collect(),
    };
    let started = Instant::now();
    let results = match trainer::evaluate(&params, &scenario, &seeds) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: evaluation: {e}");
            return EXIT_CHECKPOINT;
        }
    };
    let runtime = started.elapsed().as_secs_f64();
    let reports: Vec<RunReport> = seeds
        .iter()
        .zip(results)
        .map(|(&seed, metrics)| RunReport {
            scenario: scenario_id.clone(),
            dispatcher: "ppo".to_string(),
            seed,
            metrics,
            runtime_seconds: runtime / seeds.len() as f64,
        })
        .collect();
    log::info!("evaluation runtime {runtime:.3}s");
    if let Some(path) = &args.out {
        if let Err(code) = write_out(path, &metrics_rows(&reports)) {
            return code;
        }
    }
    print_summary(&reports);
    EXIT_OK
}

/// Resizes the fleet to `size` trucks, cycling the ordered spec list so
/// the class mix stays proportional.
fn resize_fleet(scenario: &ScenarioConfig, size: usize) -> ScenarioConfig {
    let mut out = scenario.clone();
    out.trucks = (0..size)
        .map(|i| scenario.trucks[i % scenario.trucks.len()].clone())
        .collect();
    out
}

fn cmd_sweep(args: &SweepArgs) -> i32 {
    if args.fleet_min < 1 || args.fleet_min > args.fleet_max || args.step < 1 {
        eprintln!(
            "error: invalid fleet range {}..{} step {}",
            args.fleet_min, args.fleet_max, args.step
        );
        return EXIT_USAGE;
    }
    let (scenario, scenario_id) = match load_or_default(&args.scenario) {
        Ok(v) => v,
        Err(code) => return code,
    };
    enum Entry {
        Rule(DispatcherKind),
        Ppo(Box<policy::PolicyParams>),
    }
    let mut entries: Vec<(String, Entry)> = Vec::new();
    for name in &args.dispatchers {
        if name == "ppo" {
            let Some(path) = &args.checkpoint else {
                eprintln!("error: dispatcher \"ppo\" requires --checkpoint");
                return EXIT_USAGE;
            };
            match policy::load_checkpoint(path) {
                Ok(p) => entries.push((name.clone(), Entry::Ppo(Box::new(p)))),
                Err(e) => {
                    eprintln!("error: checkpoint {}: {e}", path.display());
                    return EXIT_CHECKPOINT;
                }
            }
        } else {
            match name.parse::<DispatcherKind>() {
                Ok(kind) => entries.push((name.clone(), Entry::Rule(kind))),
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            }
        }
    }

    let mut csv = String::from("scenario,fleet_size,dispatcher,seed,produced_tons\n");
    let started = Instant::now();
    for size in (args.fleet_min..=args.fleet_max).step_by(args.step) {
        let sized = resize_fleet(&scenario, size);
        for (name, entry) in &entries {
            let tons = match entry {
                Entry::Rule(kind) => {
                    trainer::run_dispatcher_episode(&sized, *kind, args.seed).produced_tons
                }
                Entry::Ppo(params) => match trainer::evaluate(params, &sized, &[args.seed]) {
                    Ok(r) => r[0].produced_tons,
                    Err(e) => {
                        eprintln!("error: evaluation at fleet size {size}: {e}");
                        return EXIT_CHECKPOINT;
                    }
                },
            };
            let _ = writeln!(csv, "{scenario_id},{size},{name},{},{tons}", args.seed);
            println!("fleet {size} {name}: {tons:.2} tons");
        }
    }
    log::info!("sweep runtime {:.3}s", started.elapsed().as_secs_f64());
    if let Some(path) = &args.out {
        if let Err(code) = write_out(path, &csv) {
            return code;
        }
    }
    EXIT_OK
}

/// Parses process arguments and dispatches; returns the process exit
/// code. Clap usage errors exit directly with code 2.
pub fn run_cli() -> i32 {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MINE_DISPATCH_LOG", "error"),
    )
    .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}
