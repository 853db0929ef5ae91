//! Pipeline stages behind the CLI subcommands.
//!
//! Every stage follows the same shape: resolve its work items, skip the
//! ones already marked done, fan the rest out to a bounded worker pool,
//! and write a per-item status marker on success. Items that fail keep
//! no marker, so a rerun retries exactly the unfinished work.
//!
//! Missing upstream outputs are a [`StageError::Order`] naming the
//! prerequisite command; everything else that prevents a stage from
//! running at all is [`StageError::Config`]. Both map to exit code 2.
//! Per-item failures are counted in the [`StageSummary`] and map to
//! exit code 1.

use crate::config::{RunConfig, RuntimeKind};
use crate::rundir::RunDir;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shellforge_core::agent::{solve_once, AgentParams};
use shellforge_core::collector::{collect_trajectory, CollectorConfig, ObservationSource};
use shellforge_core::dataset::{
    audit_observations, compute_stats, export_sft, AuditParams, ToolInventory, TrajectoryStore,
};
use shellforge_core::envgen::{
    construct_artifact, generate_dockerfile, plan_files, repair_dockerfile, write_bundle,
    EnvGenParams, EnvironmentBundle,
};
use shellforge_core::gateway::Gateway;
use shellforge_core::sandbox::{BuildStatus, ContainerRuntime, Sandbox};
use shellforge_core::taskgen::{
    generate_seeds, refine_until_accepted, RefinementOutcome, TaskGenParams, TaskSeed, TaskSpec,
    Taxonomy,
};
use shellforge_core::testgen::{generate_suite, install_suite, GeneratedSuite, TestGenError, TestGenParams};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

#[derive(Debug)]
pub enum StageError {
    /// An upstream stage has not produced its outputs yet.
    Order { prerequisite: &'static str, detail: String },
    /// The stage cannot run at all with the given configuration or inputs.
    Config(String),
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageError::Order { prerequisite, detail } => {
                write!(f, "{detail}; run `shellforge {prerequisite}` first")
            }
            StageError::Config(detail) => write!(f, "{detail}"),
        }
    }
}

impl std::error::Error for StageError {}

fn order(prerequisite: &'static str, detail: impl Into<String>) -> StageError {
    StageError::Order { prerequisite, detail: detail.into() }
}

/// Per-item outcome counts for one stage invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub completed: usize,
    /// Items already marked done before this invocation.
    pub skipped: usize,
    /// Items that finished with a negative verdict (rejected seed,
    /// invalid bundle, unapproved suite). Done, not retried, not failures.
    pub discarded: usize,
    pub failed: usize,
}

impl StageSummary {
    pub fn exit_code(&self) -> u8 {
        if self.failed > 0 {
            1
        } else {
            0
        }
    }
}

impl std::fmt::Display for StageSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} completed, {} skipped, {} discarded, {} failed",
            self.completed, self.skipped, self.discarded, self.failed
        )
    }
}

/// How one work item ended. `Discarded` is a terminal negative verdict
/// recorded with a marker; failures are plain `Err` and keep no marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ItemOutcome {
    Completed,
    Discarded,
}

/// Shared context for every stage invocation.
pub struct StageCtx<'a> {
    pub config: &'a RunConfig,
    pub rundir: &'a RunDir,
    pub gateway: &'a Gateway,
}

impl StageCtx<'_> {
    /// Builds the sandbox for stages that execute commands or builds.
    /// The process runtime keeps its state inside the run directory.
    pub fn sandbox(&self) -> Sandbox {
        let runtime: Arc<dyn ContainerRuntime> = match self.config.runtime {
            RuntimeKind::Docker => match &self.config.docker_socket {
                Some(socket) => Arc::new(shellforge_core::sandbox::DockerRuntime::with_socket(socket)),
                None => Arc::new(shellforge_core::sandbox::DockerRuntime::new()),
            },
            RuntimeKind::Process => {
                Arc::new(shellforge_core::sandbox::ProcessRuntime::new(self.rundir.process_state_dir()))
            }
        };
        Sandbox::new(
            runtime,
            self.config.run_id.clone(),
            Duration::from_secs(self.config.exec_timeout_secs),
        )
    }
}

/// Runs `work` over the items not yet marked done, on up to
/// `config.workers` threads. Completed and discarded items get their
/// markers inside `work`; failures are logged and counted only.
fn process_items(
    ctx: &StageCtx,
    stage: &'static str,
    items: &[String],
    work: &(dyn Fn(&str) -> Result<ItemOutcome, String> + Sync),
) -> StageSummary {
    let pending: Vec<&String> = items.iter().filter(|item| !ctx.rundir.is_done(stage, item)).collect();
    let mut summary =
        StageSummary { skipped: items.len() - pending.len(), ..StageSummary::default() };
    let tally = Mutex::new(&mut summary);
    let next = AtomicUsize::new(0);
    let workers = (ctx.config.workers as usize).min(pending.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = pending.get(index) else { break };
                match work(item) {
                    Ok(ItemOutcome::Completed) => {
                        ctx.rundir.log_event(stage, item, "completed", serde_json::json!({}));
                        tally.lock().unwrap().completed += 1;
                    }
                    Ok(ItemOutcome::Discarded) => {
                        ctx.rundir.log_event(stage, item, "discarded", serde_json::json!({}));
                        tally.lock().unwrap().discarded += 1;
                    }
                    Err(error) => {
                        tracing::warn!(stage, item = item.as_str(), %error, "item failed");
                        ctx.rundir.log_event(stage, item, "failed", serde_json::json!({"error": error}));
                        tally.lock().unwrap().failed += 1;
                    }
                }
            });
        }
    });
    finish(ctx, stage, summary)
}

/// Logs the stage-level summary event and hands the summary back.
fn finish(ctx: &StageCtx, stage: &'static str, summary: StageSummary) -> StageSummary {
    ctx.rundir.log_event(
        stage,
        "summary",
        "finished",
        serde_json::to_value(summary).expect("summary serializes"),
    );
    summary
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|err| format!("cannot read {}: {err}", path.display()))?;
    serde_json::from_str(&text).map_err(|err| format!("cannot parse {}: {err}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|err| format!("cannot create {}: {err}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|err| err.to_string())?;
    std::fs::write(path, text).map_err(|err| format!("cannot write {}: {err}", path.display()))
}

/// Appends one JSON line with a single O_APPEND write.
fn append_jsonl(path: &Path, value: &impl Serialize) -> Result<(), String> {
    let mut line = serde_json::to_string(value).map_err(|err| err.to_string())?;
    line.push('\n');
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut file| file.write_all(line.as_bytes()))
        .map_err(|err| format!("cannot append {}: {err}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedsMarker {
    count: usize,
}

/// `seeds`: one seed batch per taxonomy category, written to
/// seeds/seeds.json. Single work item; a rerun skips it.
pub fn seeds(ctx: &StageCtx) -> Result<StageSummary, StageError> {
    let mut summary = StageSummary::default();
    if ctx.rundir.is_done("seeds", "all") {
        summary.skipped = 1;
        return Ok(finish(ctx, "seeds", summary));
    }
    let params = TaskGenParams {
        seeds_per_category: ctx.config.seeds_per_category,
        ..TaskGenParams::default()
    };
    match generate_seeds(ctx.gateway, &Taxonomy::builtin(), &params) {
        Ok(seeds) => {
            write_json(&ctx.rundir.seeds_path(), &seeds).map_err(StageError::Config)?;
            ctx.rundir
                .mark_done("seeds", "all", &SeedsMarker { count: seeds.len() })
                .map_err(StageError::Config)?;
            ctx.rundir.log_event("seeds", "all", "completed", serde_json::json!({"count": seeds.len()}));
            summary.completed = 1;
        }
        Err(error) => {
            tracing::warn!(%error, "seed generation failed");
            ctx.rundir.log_event("seeds", "all", "failed", serde_json::json!({"error": error.to_string()}));
            summary.failed = 1;
        }
    }
    Ok(finish(ctx, "seeds", summary))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum ProposeMarker {
    Accepted { rounds_used: u32 },
    Rejected { rounds_used: u32 },
}

/// `propose`: drives every seed through the propose/evaluate/refine loop.
/// Accepted specs land in specs/<task_id>.json; rejections append to
/// specs/rejections.jsonl.
pub fn propose(ctx: &StageCtx) -> Result<StageSummary, StageError> {
    let seeds_path = ctx.rundir.seeds_path();
    if !seeds_path.is_file() {
        return Err(order("seeds", "no seeds found in the run directory"));
    }
    let seeds: Vec<TaskSeed> = read_json(&seeds_path).map_err(StageError::Config)?;
    let by_slug: BTreeMap<String, TaskSeed> =
        seeds.into_iter().map(|seed| (seed.slug.clone(), seed)).collect();
    let items: Vec<String> = by_slug.keys().cloned().collect();
    let params = TaskGenParams::default();
    Ok(process_items(ctx, "propose", &items, &|slug| {
        let seed = &by_slug[slug];
        match refine_until_accepted(ctx.gateway, seed, &params).map_err(|err| err.to_string())? {
            RefinementOutcome::Accepted(spec) => {
                write_json(&ctx.rundir.spec_path(slug), &spec)?;
                ctx.rundir.mark_done(
                    "propose",
                    slug,
                    &ProposeMarker::Accepted { rounds_used: spec.refinement_rounds_used },
                )?;
                Ok(ItemOutcome::Completed)
            }
            RefinementOutcome::Rejected(record) => {
                append_jsonl(&ctx.rundir.rejections_path(), &record)?;
                ctx.rundir.mark_done(
                    "propose",
                    slug,
                    &ProposeMarker::Rejected { rounds_used: record.rounds_used },
                )?;
                Ok(ItemOutcome::Discarded)
            }
        }
    }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum BuildMarker {
    Valid { image_ref: String, attempts: u32 },
    Invalid { attempts: u32 },
}

/// `build-envs`: plans and constructs each accepted spec's bundle, then
/// builds its image under the repair loop. An exhausted repair loop is a
/// discarded bundle, not a stage failure.
pub fn build_envs(ctx: &StageCtx, sandbox: &Sandbox) -> Result<StageSummary, StageError> {
    let items = ctx.rundir.spec_ids();
    if items.is_empty() {
        return Err(order("propose", "no task specs found in the run directory"));
    }
    let params = EnvGenParams { base_image: ctx.config.base_image.clone(), ..EnvGenParams::default() };
    Ok(process_items(ctx, "build-envs", &items, &|task_id| {
        let spec: TaskSpec = read_json(&ctx.rundir.spec_path(task_id))?;
        let blueprint = plan_files(ctx.gateway, &spec, &params).map_err(|err| err.to_string())?;
        let mut artifacts = Vec::with_capacity(blueprint.entries.len());
        for entry in &blueprint.entries {
            artifacts.push(
                construct_artifact(ctx.gateway, &spec, &blueprint, entry, &params)
                    .map_err(|err| err.to_string())?,
            );
        }
        let dockerfile =
            generate_dockerfile(ctx.gateway, &spec, &blueprint, &params).map_err(|err| err.to_string())?;
        let bundle = write_bundle(
            &ctx.rundir.bundle_root(task_id),
            &spec,
            &artifacts,
            &dockerfile,
            &sandbox.image_tag(task_id),
            &params,
        )
        .map_err(|err| err.to_string())?;
        let artifact_paths: Vec<String> = artifacts.iter().map(|a| a.path.clone()).collect();
        let dockerfile_path = bundle.dockerfile_path();
        let report = sandbox
            .build_with_repair(&bundle.root, task_id, ctx.config.build_max_attempts, &mut |stderr| {
                // The loop rewrites the Dockerfile between attempts, so
                // each repair starts from what is on disk now.
                let current = std::fs::read_to_string(&dockerfile_path).map_err(|err| err.to_string())?;
                repair_dockerfile(ctx.gateway, task_id, &current, stderr, &artifact_paths, &params)
                    .map_err(|err| err.to_string())
            })
            .map_err(|err| err.to_string())?;
        let attempts = report.attempts.len() as u32;
        match report.status {
            BuildStatus::Valid => {
                let image_ref = report.image_ref.expect("valid build carries an image ref");
                ctx.rundir.mark_done("build-envs", task_id, &BuildMarker::Valid { image_ref, attempts })?;
                Ok(ItemOutcome::Completed)
            }
            BuildStatus::Invalid => {
                ctx.rundir.mark_done("build-envs", task_id, &BuildMarker::Invalid { attempts })?;
                Ok(ItemOutcome::Discarded)
            }
        }
    }))
}

/// Task ids whose bundle built successfully, with their image refs.
fn valid_images(rundir: &RunDir) -> BTreeMap<String, String> {
    rundir
        .done_items("build-envs")
        .into_iter()
        .filter_map(|task_id| match rundir.read_marker::<BuildMarker>("build-envs", &task_id) {
            Some(BuildMarker::Valid { image_ref, .. }) => Some((task_id, image_ref)),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum SuiteMarker {
    Approved { test_count: u32, rounds_used: u32 },
    Rejected { rounds_used: u32, feedback: String },
}

/// `gen-tests`: generates, dry-runs, and judges a verification suite for
/// every valid bundle, then installs the approved suite into the bundle.
pub fn gen_tests(ctx: &StageCtx, sandbox: &Sandbox) -> Result<StageSummary, StageError> {
    let images = valid_images(ctx.rundir);
    if images.is_empty() {
        return Err(order("build-envs", "no valid environment bundles found"));
    }
    let items: Vec<String> = images.keys().cloned().collect();
    let params = TestGenParams::default();
    Ok(process_items(ctx, "gen-tests", &items, &|task_id| {
        let image_ref = &images[task_id];
        let bundle =
            EnvironmentBundle { task_id: task_id.to_string(), root: ctx.rundir.bundle_root(task_id) };
        let task_yaml_path = bundle.task_yaml_path();
        let task_yaml_text = std::fs::read_to_string(&task_yaml_path)
            .map_err(|err| format!("cannot read {}: {err}", task_yaml_path.display()))?;
        match generate_suite(ctx.gateway, sandbox, image_ref, task_id, &task_yaml_text, &params) {
            Ok(suite) => {
                install_suite(&bundle, &suite).map_err(|err| err.to_string())?;
                write_json(&ctx.rundir.suite_path(task_id), &suite)?;
                ctx.rundir.mark_done(
                    "gen-tests",
                    task_id,
                    &SuiteMarker::Approved { test_count: suite.test_count, rounds_used: suite.rounds_used },
                )?;
                Ok(ItemOutcome::Completed)
            }
            Err(TestGenError::NotApproved { rounds, last_feedback, .. }) => {
                ctx.rundir.mark_done(
                    "gen-tests",
                    task_id,
                    &SuiteMarker::Rejected { rounds_used: rounds, feedback: last_feedback },
                )?;
                Ok(ItemOutcome::Discarded)
            }
            Err(err) => Err(err.to_string()),
        }
    }))
}

/// Task ids holding an approved suite, with their image refs.
fn collectable_tasks(rundir: &RunDir) -> BTreeMap<String, String> {
    let images = valid_images(rundir);
    rundir
        .done_items("gen-tests")
        .into_iter()
        .filter(|task_id| {
            matches!(rundir.read_marker::<SuiteMarker>("gen-tests", task_id), Some(SuiteMarker::Approved { .. }))
        })
        .filter_map(|task_id| images.get(&task_id).map(|image| (task_id.clone(), image.clone())))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CollectMarker {
    turns: u32,
    completion_rate: f64,
    error_steps: usize,
    recovery_steps: usize,
}

/// `collect`: runs the error-injected collection loop once per task with
/// an approved suite and appends the trajectory to the run's store.
pub fn collect(ctx: &StageCtx, sandbox: &Sandbox) -> Result<StageSummary, StageError> {
    let tasks = collectable_tasks(ctx.rundir);
    if tasks.is_empty() {
        return Err(order("gen-tests", "no approved verification suites found"));
    }
    let items: Vec<String> = tasks.keys().cloned().collect();
    let collector_config = CollectorConfig {
        epsilon: ctx.config.epsilon,
        rng_seed: ctx.config.rng_seed,
        max_turns: ctx.config.max_turns,
        observation_source: ctx.config.observation_source,
        critic_regen_cap: ctx.config.critic_regen_cap,
        ..CollectorConfig::default()
    };
    let store = TrajectoryStore::new(ctx.rundir.trajectories_path());
    Ok(process_items(ctx, "collect", &items, &|task_id| {
        let image_ref = &tasks[task_id];
        let bundle =
            EnvironmentBundle { task_id: task_id.to_string(), root: ctx.rundir.bundle_root(task_id) };
        let task = bundle.read_task_yaml().map_err(|err| err.to_string())?;
        let suite: GeneratedSuite = read_json(&ctx.rundir.suite_path(task_id))?;
        let trajectory =
            collect_trajectory(ctx.gateway, sandbox, image_ref, &task, &suite.files, &collector_config)
                .map_err(|err| err.to_string())?;
        store.append(&trajectory).map_err(|err| err.to_string())?;
        ctx.rundir.mark_done(
            "collect",
            task_id,
            &CollectMarker {
                turns: trajectory.turn_count,
                completion_rate: trajectory.completion_rate,
                error_steps: trajectory.error_steps(),
                recovery_steps: trajectory.recovery_steps(),
            },
        )?;
        Ok(ItemOutcome::Completed)
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct SolveMarker {
    runs: u32,
    solved: u32,
    pass_rate: f64,
}

/// `solve`: estimates each task's pass rate by running the plain solver
/// `solve_runs` times; every run's trajectory is kept in a separate store.
pub fn solve(ctx: &StageCtx, sandbox: &Sandbox) -> Result<StageSummary, StageError> {
    let tasks = collectable_tasks(ctx.rundir);
    if tasks.is_empty() {
        return Err(order("gen-tests", "no approved verification suites found"));
    }
    let items: Vec<String> = tasks.keys().cloned().collect();
    let params = AgentParams { max_turns: ctx.config.max_turns, ..AgentParams::default() };
    let store = TrajectoryStore::new(ctx.rundir.solve_store_path());
    Ok(process_items(ctx, "solve", &items, &|task_id| {
        let image_ref = &tasks[task_id];
        let bundle =
            EnvironmentBundle { task_id: task_id.to_string(), root: ctx.rundir.bundle_root(task_id) };
        let task = bundle.read_task_yaml().map_err(|err| err.to_string())?;
        let suite: GeneratedSuite = read_json(&ctx.rundir.suite_path(task_id))?;
        let runs = ctx.config.solve_runs;
        let mut solved = 0u32;
        for _ in 0..runs {
            let report = solve_once(ctx.gateway, sandbox, image_ref, &task, &suite.files, &params)
                .map_err(|err| err.to_string())?;
            store.append(&report.trajectory).map_err(|err| err.to_string())?;
            if report.solved {
                solved += 1;
            }
        }
        let pass_rate = f64::from(solved) / f64::from(runs);
        ctx.rundir.mark_done("solve", task_id, &SolveMarker { runs, solved, pass_rate })?;
        Ok(ItemOutcome::Completed)
    }))
}

/// Loads the run's tool inventory, seeding the default one on first use
/// so it can be inspected and edited.
fn load_inventory(rundir: &RunDir) -> Result<ToolInventory, String> {
    let path = rundir.inventory_path();
    if path.is_file() {
        let text = std::fs::read_to_string(&path)
            .map_err(|err| format!("cannot read {}: {err}", path.display()))?;
        ToolInventory::from_json(&text).map_err(|err| format!("invalid {}: {err}", path.display()))
    } else {
        let inventory = ToolInventory::default();
        std::fs::write(&path, inventory.to_json())
            .map_err(|err| format!("cannot write {}: {err}", path.display()))?;
        Ok(inventory)
    }
}

/// `stats`: recomputes corpus statistics over the trajectory store and
/// writes exports/stats.json. Always recomputed; no marker.
pub fn stats(ctx: &StageCtx) -> Result<StageSummary, StageError> {
    let store = TrajectoryStore::new(ctx.rundir.trajectories_path());
    let trajectories = store.read_all().map_err(|err| StageError::Config(err.to_string()))?;
    if trajectories.is_empty() {
        return Err(order("collect", "the trajectory store is empty"));
    }
    let mut summary = StageSummary::default();
    let inventory = load_inventory(ctx.rundir).map_err(StageError::Config)?;
    match compute_stats(&trajectories, &inventory) {
        Ok(stats) => {
            let out = ctx.rundir.exports_dir().join("stats.json");
            write_json(&out, &stats).map_err(StageError::Config)?;
            println!(
                "{} trajectories, {:.1} avg turns, {:.0} avg approx tokens, {} unique tools",
                stats.trajectory_count, stats.avg_turns, stats.avg_approx_tokens, stats.unique_tool_count
            );
            for (category, count) in &stats.tool_histogram {
                println!("  {category}: {count}");
            }
            ctx.rundir.log_event("stats", "all", "completed", serde_json::json!({"out": out.display().to_string()}));
            summary.completed = 1;
        }
        Err(error) => {
            tracing::warn!(%error, "stats failed");
            ctx.rundir.log_event("stats", "all", "failed", serde_json::json!({"error": error.to_string()}));
            summary.failed = 1;
        }
    }
    Ok(finish(ctx, "stats", summary))
}

/// Task descriptions for the export's system messages, from the accepted
/// specs on disk.
fn task_descriptions(rundir: &RunDir) -> BTreeMap<String, String> {
    rundir
        .spec_ids()
        .into_iter()
        .filter_map(|task_id| {
            let spec: TaskSpec = read_json(&rundir.spec_path(&task_id)).ok()?;
            Some((task_id, spec.objective))
        })
        .collect()
}

/// `filter-export`: writes the chat-format export of every trajectory at
/// or above the completion threshold. Always recomputed; no marker.
pub fn filter_export(ctx: &StageCtx, tau_flag: Option<f64>) -> Result<StageSummary, StageError> {
    let tau = tau_flag.unwrap_or(ctx.config.tau);
    if !(0.0..=1.0).contains(&tau) {
        return Err(StageError::Config(format!("tau {tau} is outside [0, 1]")));
    }
    let store = TrajectoryStore::new(ctx.rundir.trajectories_path());
    let trajectories = store.read_all().map_err(|err| StageError::Config(err.to_string()))?;
    if trajectories.is_empty() {
        return Err(order("collect", "the trajectory store is empty"));
    }
    let mut summary = StageSummary::default();
    let descriptions = task_descriptions(ctx.rundir);
    let out = ctx.rundir.exports_dir().join(format!("sft-tau{tau:.2}.jsonl"));
    match export_sft(&trajectories, tau, &descriptions, &out) {
        Ok(report) => {
            println!(
                "exported {} of {} trajectories at tau {tau:.2} to {}",
                report.exported,
                trajectories.len(),
                out.display()
            );
            for (task_id, reason) in &report.skipped {
                println!("  skipped {task_id}: {reason}");
            }
            ctx.rundir.log_event(
                "filter-export",
                "all",
                "completed",
                serde_json::json!({"tau": tau, "exported": report.exported, "skipped": report.skipped.len()}),
            );
            summary.completed = 1;
        }
        Err(error) => {
            tracing::warn!(%error, "export failed");
            ctx.rundir.log_event("filter-export", "all", "failed", serde_json::json!({"error": error.to_string()}));
            summary.failed = 1;
        }
    }
    Ok(finish(ctx, "filter-export", summary))
}

/// `audit`: runs the defect judge over the simulated-observation subset
/// of the store and writes exports/audit.json. Always recomputed.
pub fn audit(ctx: &StageCtx) -> Result<StageSummary, StageError> {
    let store = TrajectoryStore::new(ctx.rundir.trajectories_path());
    let trajectories = store.read_all().map_err(|err| StageError::Config(err.to_string()))?;
    if trajectories.is_empty() {
        return Err(order("collect", "the trajectory store is empty"));
    }
    let simulated: Vec<_> = trajectories
        .into_iter()
        .filter(|t| t.observation_source == ObservationSource::Simulated)
        .collect();
    if simulated.is_empty() {
        return Err(StageError::Config(
            "the store has no simulated-observation trajectories; collect with \
             observation_source = \"simulated\" to audit"
                .into(),
        ));
    }
    let mut summary = StageSummary::default();
    match audit_observations(ctx.gateway, &simulated, &AuditParams::default()) {
        Ok(report) => {
            let out = ctx.rundir.exports_dir().join("audit.json");
            write_json(&out, &report).map_err(StageError::Config)?;
            println!(
                "audited {} steps across {} trajectories: {} findings ({:.1}% flagged), {} skipped",
                report.audited_steps,
                simulated.len(),
                report.findings.len(),
                report.flagged_fraction() * 100.0,
                report.skipped_steps
            );
            for (class, count) in &report.class_histogram {
                println!("  {}: {count}", class.as_str());
            }
            ctx.rundir.log_event(
                "audit",
                "all",
                "completed",
                serde_json::json!({"findings": report.findings.len(), "audited": report.audited_steps}),
            );
            summary.completed = 1;
        }
        Err(error) => {
            tracing::warn!(%error, "audit failed");
            ctx.rundir.log_event("audit", "all", "failed", serde_json::json!({"error": error.to_string()}));
            summary.failed = 1;
        }
    }
    Ok(finish(ctx, "audit", summary))
}
