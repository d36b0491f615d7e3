//! `ens` — scenario runner for the ensemble coordination runtime.
//!
//! `ens run --scenario sampling --comms local --nworkers 4 --seed 1` runs a
//! named scenario and writes `H_final.ensh`, `report.json`, `trace.csv`,
//! `ensemble.log`, and `libE_stats.txt` into the output directory. Exit
//! codes: 0 when the exit criteria were met, 2 on an aborted run, 3 on a
//! wallclock timeout, 64 on usage errors.

mod config;
mod report;
mod scenarios;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ens_core::comms::CommsMode;
use ens_core::functions::builtin_registry;
use ens_core::launch::{run_on_pool, PoolOptions};
use ens_core::logging::LogLevel;
use ens_core::manager::{RunFlag, RunInputs};

#[derive(Parser)]
#[command(name = "ens", version, about = "Coordinate dynamic ensembles of calculations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named scenario.
    Run(RunArgs),
    /// List the available scenarios.
    Scenarios,
    /// Internal: worker process entry point.
    #[command(name = "__worker", hide = true)]
    Worker(WorkerArgs),
    /// Internal: the bundled synthetic application.
    #[command(name = "__watchdog-app", hide = true)]
    WatchdogApp {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario name (see `ens scenarios`).
    #[arg(long)]
    scenario: String,
    /// Transport: inproc, local, or tcp.
    #[arg(long, default_value = "inproc")]
    comms: String,
    /// Simulation workers. Persistent scenarios add one zero-resource
    /// worker on top to host the generator.
    #[arg(long, default_value_t = 1)]
    nworkers: u32,
    /// Run seed; worker RNG streams derive from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// JSON configuration merged over the scenario defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for history, report, trace, and logs.
    #[arg(long, default_value = "ens-out")]
    outdir: PathBuf,
    /// debug, info, manager_warning, or error.
    #[arg(long, default_value = "info")]
    log_level: String,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    stdio: bool,
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    worker_id: u32,
    /// Echo transport frames instead of running the worker loop
    /// (conformance testing).
    #[arg(long)]
    echo: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => match cmd_run(args) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("ens: {e:#}");
                ExitCode::from(64)
            }
        },
        Command::Scenarios => {
            for s in scenarios::catalog() {
                println!("{:<22} {}", s.name, s.summary);
            }
            ExitCode::SUCCESS
        }
        Command::Worker(args) => cmd_worker(args),
        Command::WatchdogApp { args } => {
            ExitCode::from(ens_core::functions::synthetic::watchdog_app_main(&args) as u8)
        }
    }
}

fn cmd_worker(args: WorkerArgs) -> ExitCode {
    if args.echo {
        let comm = match (args.stdio, args.connect) {
            (true, None) => ens_core::comms::stdio_worker_comm(args.worker_id),
            (false, Some(addr)) => ens_core::comms::connect_tcp(&addr, args.worker_id),
            _ => {
                eprintln!("__worker needs exactly one of --stdio or --connect ADDR");
                return ExitCode::from(64);
            }
        };
        return match comm {
            Ok(mut comm) => {
                ens_core::comms::conformance::echo_loop(&mut comm);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("worker {}: {e}", args.worker_id);
                ExitCode::FAILURE
            }
        };
    }
    let registry = builtin_registry();
    let outcome = match (args.stdio, args.connect) {
        (true, None) => ens_core::worker::run_stdio_worker(args.worker_id, &registry),
        (false, Some(addr)) => ens_core::worker::run_tcp_worker(&addr, args.worker_id, &registry),
        _ => {
            eprintln!("__worker needs exactly one of --stdio or --connect ADDR");
            return ExitCode::from(64);
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("worker {}: {e}", args.worker_id);
            ExitCode::FAILURE
        }
    }
}

fn worker_cmd(mode: CommsMode) -> anyhow::Result<Option<Vec<String>>> {
    let me = std::env::current_exe().context("locating own executable")?;
    let me = me.to_string_lossy().into_owned();
    Ok(match mode {
        CommsMode::Inproc => None,
        CommsMode::Local => Some(vec![
            me,
            "__worker".into(),
            "--stdio".into(),
            "--worker-id".into(),
            "{worker_id}".into(),
        ]),
        CommsMode::Tcp => Some(vec![
            me,
            "__worker".into(),
            "--connect".into(),
            "{addr}".into(),
            "--worker-id".into(),
            "{worker_id}".into(),
        ]),
    })
}

/// Fill `{self}` placeholders (the bundled app path) in a config document.
fn resolve_self_paths(doc: &mut serde_json::Value) -> anyhow::Result<()> {
    let me = std::env::current_exe().context("locating own executable")?;
    let me = me.to_string_lossy().into_owned();
    fn walk(v: &mut serde_json::Value, me: &str) {
        match v {
            serde_json::Value::String(s) if s == "{self}" => *s = me.to_string(),
            serde_json::Value::Array(items) => items.iter_mut().for_each(|i| walk(i, me)),
            serde_json::Value::Object(map) => map.values_mut().for_each(|i| walk(i, me)),
            _ => {}
        }
    }
    walk(doc, &me);
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let Some(scenario) = scenarios::find(&args.scenario) else {
        anyhow::bail!(
            "unknown scenario '{}'; run `ens scenarios` for the list",
            args.scenario
        );
    };
    let mode: CommsMode = args
        .comms
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;
    let log_level: LogLevel = args
        .log_level
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;

    let mut doc = (scenario.defaults)();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config::merge(&mut doc, &overlay);
    }
    resolve_self_paths(&mut doc)?;
    let doc = config::parse_doc(doc)?;

    std::fs::create_dir_all(&args.outdir)
        .with_context(|| format!("creating {}", args.outdir.display()))?;
    let outdir = args.outdir.canonicalize()?;
    let ensemble_dir = outdir.join("ensemble");

    let nworkers = args.nworkers + scenario.extra_gen_worker as u32;
    let mut libe = doc.libe_specs;
    if scenario.extra_gen_worker && libe.zero_resource_workers.is_none() {
        libe.zero_resource_workers = Some(vec![1]);
    }
    let ensemble_config = libe.into_ensemble_config(ensemble_dir, outdir.clone(), log_level);

    let initial_history = match scenario.initial_history {
        Some(build) => Some(build(args.seed)?),
        None => None,
    };
    let inputs = RunInputs {
        sim: doc.sim_specs,
        gen: doc.gen_specs,
        alloc: doc.alloc_specs,
        exit: doc.exit_criteria,
        config: ensemble_config,
        extra_fields: doc.extra_fields,
        initial_history,
        seed: args.seed,
    };

    let mut pool = PoolOptions::inproc(nworkers);
    pool.mode = mode;
    pool.worker_cmd = worker_cmd(mode)?;

    let started = Instant::now();
    let registry = Arc::new(builtin_registry());
    let (output, pool_report) = run_on_pool(&pool, registry, inputs)?;
    let wall_time_s = started.elapsed().as_secs_f64();
    if !pool_report.stragglers.is_empty() {
        eprintln!("ens: workers killed at shutdown: {:?}", pool_report.stragglers);
    }

    let history_file = outdir.join("H_final.ensh");
    output.history.save(&history_file)?;
    report::write_trace_csv(&outdir.join("trace.csv"), &output.trace)?;

    let flag_name = match output.flag {
        RunFlag::CriteriaMet => "criteria_met",
        RunFlag::Timeout => "timeout",
        RunFlag::Aborted => "aborted",
    };
    let scenario_report = report::ScenarioReport {
        scenario: scenario.name.to_string(),
        comms: args.comms.clone(),
        nworkers,
        seed: args.seed,
        flag: flag_name.to_string(),
        counts: report::counts_from_history(&output.history),
        wall_time_s,
        runtime_stats: report::runtime_stats(&output.history),
        history_file: history_file.display().to_string(),
        checkpoints: output
            .stats
            .checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    std::fs::write(
        outdir.join("report.json"),
        serde_json::to_string_pretty(&scenario_report)?,
    )?;

    println!(
        "{}: flag={} generated={} returned={} canceled={} failed={} wall={:.2}s",
        scenario.name,
        flag_name,
        scenario_report.counts.generated,
        scenario_report.counts.returned,
        scenario_report.counts.canceled,
        scenario_report.counts.failed,
        wall_time_s
    );

    Ok(match output.flag {
        RunFlag::CriteriaMet => ExitCode::SUCCESS,
        RunFlag::Aborted => ExitCode::from(2),
        RunFlag::Timeout => ExitCode::from(3),
    })
}
