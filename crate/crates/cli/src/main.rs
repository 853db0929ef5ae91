//! `shellforge`: one subcommand per pipeline stage, a declarative config
//! per run directory, and flags that override config fields.

use clap::{Parser, Subcommand};
use shellforge_cli::config::{
    parse_gateway_mode, parse_observation_source, parse_runtime, Overrides, RunConfig, RuntimeKind,
};
use shellforge_cli::rundir::RunDir;
use shellforge_cli::stages::{self, StageCtx};
use shellforge_core::collector::ObservationSource;
use shellforge_core::gateway::{CassetteStore, Gateway, GatewayMode, HttpProvider, HttpProviderConfig, Provider};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

#[derive(Parser)]
#[command(
    name = "shellforge",
    version,
    about = "Synthesizes verifiable terminal-task environments and collects \
             error-injected agent trajectories"
)]
struct Cli {
    /// Directory holding the run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,

    /// Config file to load; defaults to <runs_root>/<run_id>/config.toml
    /// when that exists, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run to operate on.
    #[arg(long, global = true)]
    run_id: Option<String>,

    /// Gateway mode: live, record, or replay.
    #[arg(long, global = true, value_parser = parse_gateway_mode)]
    gateway_mode: Option<GatewayMode>,

    /// Sandbox backend: docker or process.
    #[arg(long, global = true, value_parser = parse_runtime)]
    runtime: Option<RuntimeKind>,

    /// Error-injection probability per step.
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    /// Run-level seed for the per-task intent streams.
    #[arg(long, global = true)]
    rng_seed: Option<u64>,

    /// Turn cap per trajectory.
    #[arg(long, global = true)]
    max_turns: Option<u32>,

    /// Worker threads for per-item stage work.
    #[arg(long, global = true)]
    workers: Option<u32>,

    /// Observation source for collection: real or simulated.
    #[arg(long, global = true, value_parser = parse_observation_source)]
    observation_source: Option<ObservationSource>,

    /// Task seeds generated per taxonomy category.
    #[arg(long, global = true)]
    seeds_per_category: Option<u32>,

    /// Solver runs per task for pass-rate estimation.
    #[arg(long, global = true)]
    solve_runs: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task seeds for every taxonomy category.
    Seeds,
    /// Refine seeds into evaluator-approved task specs.
    Propose,
    /// Construct environment bundles and build their images.
    BuildEnvs,
    /// Generate, dry-run, and install verification suites.
    GenTests,
    /// Collect error-injected trajectories into the run's store.
    Collect,
    /// Estimate task pass rates with the plain solver agent.
    Solve,
    /// Recompute corpus statistics over the trajectory store.
    Stats,
    /// Export trajectories at or above the completion threshold.
    FilterExport {
        /// Completion-rate threshold in [0, 1]; defaults to the config value.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Audit simulated observations for defects.
    Audit,
}

fn main() -> ExitCode {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let mut config = load_config(&cli)?;
    let overrides = Overrides {
        run_id: cli.run_id.clone(),
        gateway_mode: cli.gateway_mode,
        runtime: cli.runtime,
        epsilon: cli.epsilon,
        rng_seed: cli.rng_seed,
        max_turns: cli.max_turns,
        tau: match &cli.command {
            Command::FilterExport { tau } => *tau,
            _ => None,
        },
        workers: cli.workers,
        observation_source: cli.observation_source,
        seeds_per_category: cli.seeds_per_category,
        solve_runs: cli.solve_runs,
    };
    config.apply(&overrides);
    config.validate()?;
    let rundir = RunDir::ensure(&cli.runs_root, &config.run_id)?;
    // The effective config is checked into the run directory so the run
    // can be reproduced from the directory alone.
    config.save(&rundir.config_path())?;
    let _lock = rundir.lock()?;
    let gateway = build_gateway(&config, &rundir)?;
    let ctx = StageCtx { config: &config, rundir: &rundir, gateway: &gateway };
    let (stage, result) = match &cli.command {
        Command::Seeds => ("seeds", stages::seeds(&ctx)),
        Command::Propose => ("propose", stages::propose(&ctx)),
        Command::BuildEnvs => ("build-envs", stages::build_envs(&ctx, &ctx.sandbox())),
        Command::GenTests => ("gen-tests", stages::gen_tests(&ctx, &ctx.sandbox())),
        Command::Collect => ("collect", stages::collect(&ctx, &ctx.sandbox())),
        Command::Solve => ("solve", stages::solve(&ctx, &ctx.sandbox())),
        Command::Stats => ("stats", stages::stats(&ctx)),
        Command::FilterExport { tau } => ("filter-export", stages::filter_export(&ctx, *tau)),
        Command::Audit => ("audit", stages::audit(&ctx)),
    };
    let summary = result.map_err(|err| err.to_string())?;
    println!("{stage}: {summary}");
    Ok(ExitCode::from(summary.exit_code()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    if let Some(path) = &cli.config {
        return RunConfig::load(path);
    }
    let run_id = cli.run_id.clone().unwrap_or_else(|| RunConfig::default().run_id);
    let path = cli.runs_root.join(&run_id).join("config.toml");
    if path.is_file() {
        RunConfig::load(&path)
    } else {
        Ok(RunConfig::default())
    }
}

/// Builds the gateway for the configured mode. Replay needs no provider
/// and never touches the network; live and record use the HTTP provider,
/// whose API key is read from the configured environment variable at
/// request time and never written anywhere.
fn build_gateway(config: &RunConfig, rundir: &RunDir) -> Result<Gateway, String> {
    let store = CassetteStore::new(rundir.cassettes_dir());
    let provider: Option<Arc<dyn Provider>> = match config.gateway_mode {
        GatewayMode::Replay => None,
        GatewayMode::Live | GatewayMode::Record => {
            Some(Arc::new(HttpProvider::new(HttpProviderConfig {
                base_url: config.provider.base_url.clone(),
                model: config.provider.model.clone(),
                api_key_env: config.provider.api_key_env.clone(),
                timeout: Duration::from_secs(config.provider.timeout_secs),
            })))
        }
    };
    Gateway::new(config.gateway_mode, store, provider).map_err(|err| err.to_string())
}
