//! Shared machinery for the acceptance suite: scripted providers, a
//! deterministic multi-role fixture provider, a process-backed
//! record-then-replay pipeline driver, and trajectory builders.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use shellforge_cli::config::{RunConfig, RuntimeKind};
use shellforge_cli::rundir::RunDir;
use shellforge_cli::stages::{self, StageCtx, StageSummary};
use shellforge_core::collector::{
    approx_token_count, CriticVerdict, IntentSignal, ObservationSource, StepRecord, Trajectory,
};
use shellforge_core::envgen::TaskYaml;
use shellforge_core::gateway::{
    AgentRole, CassetteStore, Gateway, GatewayMode, PromptRequest, Provider, ProviderError,
    Speaker,
};
use shellforge_core::sandbox::{ExecResult, ProcessRuntime, Sandbox};

/// Runs one criterion check, printing a single machine-scannable verdict
/// line straight to the real stdout so libtest capture cannot swallow it.
pub fn criterion<F: FnOnce()>(name: &str, check: F) {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check));
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    writeln!(std::io::stdout().lock(), "[acceptance] {name}: {verdict}").ok();
    if let Err(payload) = outcome {
        std::panic::resume_unwind(payload);
    }
}

/// Provider that returns canned replies in order, counting calls per role.
pub struct ScriptedQueue {
    replies: Mutex<VecDeque<String>>,
    counts: Mutex<BTreeMap<&'static str, u32>>,
}

impl ScriptedQueue {
    pub fn new<I, S>(replies: I) -> Arc<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Arc::new(ScriptedQueue {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            counts: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn calls(&self, role: AgentRole) -> u32 {
        self.counts.lock().unwrap().get(role.as_str()).copied().unwrap_or(0)
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

impl Provider for ScriptedQueue {
    fn provider_id(&self) -> String {
        "scripted-queue".into()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        *self.counts.lock().unwrap().entry(request.agent_role.as_str()).or_insert(0) += 1;
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| ProviderError::Fatal("scripted replies exhausted".into()))
    }
}

/// Test suite the fixture emits: a single pytest check that fails until
/// out/result.txt holds the inventory line count.
pub const FIXTURE_TEST_BODY: &str = "import pathlib\n\n\ndef test_result_file_has_line_count():\n    path = pathlib.Path(\"out/result.txt\")\n    assert path.is_file()\n    assert path.read_text().strip() == \"3\"\n";

/// Companion conftest: pins the pytest summary duration so repeated dry
/// runs emit identical bytes (the judge prompt embeds that output).
pub const FIXTURE_CONFTEST_BODY: &str = "import _pytest.terminal as _terminal\n\n_terminal.format_session_duration = lambda seconds: \"0.00s\"\n";

/// The correct-step ladder the fixture generator walks for the counting
/// task, in order, followed by a DONE reply once all three appear in the
/// transcript.
pub const LADDER: [(&str, &str); 3] = [
    ("Inspecting the input inventory before counting.", "cat data/items.txt"),
    ("Creating the output directory required by the task.", "mkdir -p out"),
    (
        "Writing the line count to the required output file.",
        "grep -c '' data/items.txt > out/result.txt",
    ),
];

/// Per-category injected mistakes. Every command genuinely fails in the
/// fixture environment, so real and simulated runs agree that the error
/// surfaced. Keyed by a distinctive fragment of the turn directive.
pub const ERROR_STEPS: [(&str, &str, &str); 5] = [
    (
        "act on a subtle misreading",
        "The earlier processing pass should have left a cleaned copy under data/processed, so I will count that one.",
        "cat data/processed/items.txt",
    ),
    (
        "realistic defect in it",
        "Counting the entries with wc's zero-terminated mode.",
        "wc -Z data/items.txt",
    ),
    (
        "does not exist in the",
        "The canonical list is kept in the backup directory.",
        "cat data/backup/items.txt",
    ),
    (
        "conflicts with the task's stated",
        "Placing the result where reports usually land.",
        "cp data/items.txt wrong_output_dir/result.txt",
    ),
    (
        "botch your verification",
        "Confirming the final report is non-empty.",
        "test -s out/final_report.txt",
    ),
];

const RECOVERY_REPLY: (&str, &str) = (
    "The last command failed; its error output shows the path I used does not exist in this workspace. Listing the data directory to re-anchor before continuing.",
    "ls data",
);

/// Deterministic multi-role provider driving the whole pipeline over one
/// fixed counting task. Replies are a pure function of the request, so a
/// record pass and any later live pass produce identical cassettes.
pub struct FixtureProvider;

impl Provider for FixtureProvider {
    fn provider_id(&self) -> String {
        "fixture".into()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        Ok(fixture_reply(request))
    }
}

pub fn fixture_reply(request: &PromptRequest) -> String {
    match request.agent_role {
        AgentRole::Proposer => proposer_reply(request),
        AgentRole::Evaluator => evaluator_reply(request),
        AgentRole::FilePlanner => serde_json::json!({
            "entries": [{
                "path": "data/items.txt",
                "requirement": "three inventory item names, one per line, no trailing newline",
                "kind": "data",
            }]
        })
        .to_string(),
        AgentRole::Construct => "```\nalpha\nbeta\ngamma\n```".into(),
        AgentRole::Env => "```\nFROM ubuntu:24.04\nWORKDIR /workspace\nCOPY . /workspace\n```".into(),
        AgentRole::TestGenerator => serde_json::json!({
            "files": [
                {"path": "tests/test_result.py", "content": FIXTURE_TEST_BODY},
                {"path": "tests/conftest.py", "content": FIXTURE_CONFTEST_BODY},
            ]
        })
        .to_string(),
        AgentRole::Judge => r#"{"approved": true, "issues": []}"#.into(),
        AgentRole::StepGenerator => step_reply(request),
        AgentRole::Critic => r#"{"approved": true, "feedback": "consistent with the intent"}"#.into(),
        AgentRole::ObservationSynthesizer => synthesizer_reply(request),
        AgentRole::Auditor => r#"{"defect": "none", "rationale": "matches the command"}"#.into(),
    }
}

fn last_user_text(request: &PromptRequest) -> &str {
    request
        .messages
        .iter()
        .rev()
        .find(|m| m.speaker == Speaker::User)
        .map(|m| m.text.as_str())
        .unwrap_or("")
}

fn proposer_reply(request: &PromptRequest) -> String {
    let text = last_user_text(request);
    if let Some(rest) = text.split("Generate exactly ").nth(1) {
        let count: usize = rest.split_whitespace().next().and_then(|n| n.parse().ok()).unwrap_or(1);
        let category_id = text
            .split("Category ")
            .nth(1)
            .and_then(|rest| rest.split(':').next())
            .unwrap_or("0.0")
            .trim()
            .to_string();
        let accepted = matches!(category_id.as_str(), "1.1" | "2.1" | "3.1");
        let base = category_id.replace('.', "_");
        let seeds: Vec<serde_json::Value> = (0..count)
            .map(|k| {
                let suffix = if count == 1 { String::new() } else { format!("_{k}") };
                let slug = if accepted {
                    format!("ok_{base}{suffix}")
                } else {
                    format!("weak_{base}{suffix}")
                };
                serde_json::json!({
                    "slug": slug,
                    "summary": format!("Count and record the inventory entries for category {category_id}."),
                })
            })
            .collect();
        return serde_json::to_string(&seeds).expect("seed array serializes");
    }
    // Task draft for any seed; the evaluator decides which slugs survive.
    serde_json::json!({
        "objective": "Count the inventory lines in data/items.txt and record the count.",
        "input_requirements": "data/items.txt holds one inventory item name per line.",
        "output_requirements": "out/result.txt holds the line count as a single integer.",
        "success_criteria": "out/result.txt exists and contains exactly the number of lines in data/items.txt.",
    })
    .to_string()
}

fn evaluator_reply(request: &PromptRequest) -> String {
    let text = last_user_text(request);
    let slug = text
        .split("Seed: ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap_or("");
    if slug.starts_with("ok_") {
        serde_json::json!({
            "environment_complexity": 5,
            "data_generatability": 5,
            "verification_determinism": 5,
            "feedback": "fully specified and deterministically checkable",
        })
        .to_string()
    } else {
        serde_json::json!({
            "environment_complexity": 3,
            "data_generatability": 3,
            "verification_determinism": 2,
            "feedback": "the draft cannot be verified deterministically from files alone",
        })
        .to_string()
    }
}

fn assistant_ran(request: &PromptRequest, command: &str) -> bool {
    let needle = format!("```bash\n{command}\n```");
    request
        .messages
        .iter()
        .any(|m| m.speaker == Speaker::Assistant && m.text.contains(&needle))
}

fn step_reply(request: &PromptRequest) -> String {
    let text = last_user_text(request);
    if text.contains("For this turn only,") {
        for (marker, reasoning, command) in ERROR_STEPS {
            if text.contains(marker) {
                return format!("{reasoning}\n```bash\n{command}\n```");
            }
        }
        return "Running a quick consistency probe.\n```bash\nfalse\n```".into();
    }
    if text.contains("ran into a problem") {
        let (reasoning, command) = RECOVERY_REPLY;
        return format!("{reasoning}\n```bash\n{command}\n```");
    }
    for (reasoning, command) in LADDER {
        if !assistant_ran(request, command) {
            return format!("{reasoning}\n```bash\n{command}\n```");
        }
    }
    "The count is recorded in out/result.txt and matches the inventory; the task is complete.\n```\nDONE\n```".into()
}

/// (stdout, stderr, exit_code) the simulator reports per known command,
/// mirroring what the real environment produces.
pub fn simulated_observation(command: &str) -> (&'static str, &'static str, i32) {
    match command {
        "cat data/items.txt" => ("alpha\nbeta\ngamma", "", 0),
        "mkdir -p out" => ("", "", 0),
        "grep -c '' data/items.txt > out/result.txt" => ("", "", 0),
        "ls data" => ("items.txt\n", "", 0),
        "cat data/processed/items.txt" => {
            ("", "cat: data/processed/items.txt: No such file or directory\n", 1)
        }
        "wc -Z data/items.txt" => {
            ("", "wc: invalid option -- 'Z'\nTry 'wc --help' for more information.\n", 1)
        }
        "cat data/backup/items.txt" => {
            ("", "cat: data/backup/items.txt: No such file or directory\n", 1)
        }
        "cp data/items.txt wrong_output_dir/result.txt" => (
            "",
            "cp: cannot create regular file 'wrong_output_dir/result.txt': No such file or directory\n",
            1,
        ),
        "test -s out/final_report.txt" => ("", "", 1),
        "false" => ("", "", 1),
        _ => ("", "", 0),
    }
}

fn synthesizer_reply(request: &PromptRequest) -> String {
    let text = last_user_text(request);
    let command = text.rsplit("\n$ ").next().unwrap_or("").trim_end();
    let (stdout, stderr, exit_code) = simulated_observation(command);
    serde_json::json!({"stdout": stdout, "stderr": stderr, "exit_code": exit_code}).to_string()
}

/// One full pipeline pass: seeds through export, then a session sweep.
pub struct E2eRun {
    pub envs_dir: PathBuf,
    pub trajectories_path: PathBuf,
    pub suites_dir: PathBuf,
    pub export_path: PathBuf,
    pub seeds_count: usize,
    pub task_ids: Vec<String>,
    pub seeds: StageSummary,
    pub propose: StageSummary,
    pub build: StageSummary,
    pub tests: StageSummary,
    pub collect: StageSummary,
    pub export: StageSummary,
    pub swept: usize,
    pub swept_again: usize,
}

/// Record pass plus two replay passes over one shared cassette root.
pub struct E2eOutcome {
    pub record: E2eRun,
    pub replays: Vec<E2eRun>,
    pub wall: Duration,
    _base: tempfile::TempDir,
}

/// Runs the pipeline end to end once per process and shares the outcome
/// between criteria. Records with the fixture provider, then replays the
/// cassettes twice into fresh run directories with no provider at all.
pub fn e2e() -> &'static Result<E2eOutcome, String> {
    static CELL: OnceLock<Result<E2eOutcome, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = tempfile::tempdir().map_err(|err| err.to_string())?;
        let cassettes = base.path().join("cassettes");
        let started = Instant::now();
        let record = drive_pipeline(
            GatewayMode::Record,
            &cassettes,
            &base.path().join("record"),
            Some(Arc::new(FixtureProvider)),
        )?;
        let replay_a =
            drive_pipeline(GatewayMode::Replay, &cassettes, &base.path().join("replay-a"), None)?;
        let replay_b =
            drive_pipeline(GatewayMode::Replay, &cassettes, &base.path().join("replay-b"), None)?;
        Ok(E2eOutcome {
            record,
            replays: vec![replay_a, replay_b],
            wall: started.elapsed(),
            _base: base,
        })
    })
}

fn drive_pipeline(
    mode: GatewayMode,
    cassette_root: &Path,
    runs_root: &Path,
    provider: Option<Arc<dyn Provider>>,
) -> Result<E2eRun, String> {
    let config = RunConfig {
        run_id: "accept".into(),
        gateway_mode: mode,
        runtime: RuntimeKind::Process,
        seeds_per_category: 1,
        workers: 1,
        ..RunConfig::default()
    };
    let rundir = RunDir::ensure(runs_root, &config.run_id)?;
    let gateway = Gateway::new(mode, CassetteStore::new(cassette_root), provider)
        .map_err(|err| err.to_string())?;
    let ctx = StageCtx { config: &config, rundir: &rundir, gateway: &gateway };
    let sandbox = ctx.sandbox();

    let stage = |name: &str, summary: Result<StageSummary, stages::StageError>| {
        let summary = summary.map_err(|err| format!("{name} stage error: {err}"))?;
        if summary.failed > 0 {
            return Err(format!("{name} stage had {} failed item(s)", summary.failed));
        }
        Ok(summary)
    };
    let seeds = stage("seeds", stages::seeds(&ctx))?;
    let propose = stage("propose", stages::propose(&ctx))?;
    let build = stage("build-envs", stages::build_envs(&ctx, &sandbox))?;
    let tests = stage("gen-tests", stages::gen_tests(&ctx, &sandbox))?;
    let collect = stage("collect", stages::collect(&ctx, &sandbox))?;
    let export = stage("filter-export", stages::filter_export(&ctx, None))?;
    let swept = sandbox.sweep().map_err(|err| err.to_string())?;
    let swept_again = sandbox.sweep().map_err(|err| err.to_string())?;

    let seeds_text = std::fs::read_to_string(rundir.seeds_path()).map_err(|err| err.to_string())?;
    let seeds_json: Vec<serde_json::Value> =
        serde_json::from_str(&seeds_text).map_err(|err| err.to_string())?;

    Ok(E2eRun {
        envs_dir: rundir.root().join("envs"),
        trajectories_path: rundir.trajectories_path(),
        suites_dir: rundir.root().join("suites"),
        export_path: rundir.exports_dir().join(format!("sft-tau{:.2}.jsonl", config.tau)),
        seeds_count: seeds_json.len(),
        task_ids: rundir.spec_ids(),
        seeds,
        propose,
        build,
        tests,
        collect,
        export,
        swept,
        swept_again,
    })
}

/// Relative paths of every file under `root`, sorted, `/`-separated.
pub fn dir_file_listing(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    walk_files(root, root, &mut |rel, _| out.push(rel.to_string()));
    out.sort();
    out
}

/// Full byte content of every file under `root`, keyed by relative path.
pub fn dir_file_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    walk_files(root, root, &mut |rel, path| {
        out.insert(rel.to_string(), std::fs::read(path).expect("readable file"));
    });
    out
}

fn walk_files(root: &Path, dir: &Path, visit: &mut dyn FnMut(&str, &Path)) {
    let entries = match std::fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(_) => return,
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            walk_files(root, &path, visit);
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            visit(&rel, &path);
        }
    }
}

pub fn exec_result(stdout: &str, stderr: &str, exit_code: i32) -> ExecResult {
    ExecResult {
        stdout: stdout.into(),
        stderr: stderr.into(),
        exit_code,
        duration_secs: 0.0,
        truncated: false,
    }
}

/// Builds a structurally valid trajectory from an intent sequence; error
/// steps carry a failing observation, recovery flags follow from the
/// sequence, and the completion rate follows from the test counts.
pub fn build_trajectory(
    task_id: &str,
    intents: &[IntentSignal],
    tests_passed: u32,
    tests_total: u32,
) -> Trajectory {
    let steps: Vec<StepRecord> = intents
        .iter()
        .enumerate()
        .map(|(position, intent)| {
            let (reasoning, command, observation) = if intent.is_error() {
                (
                    "Acting on a bad assumption.".to_string(),
                    format!("cat missing_{position}.txt"),
                    exec_result(
                        "",
                        &format!("cat: missing_{position}.txt: No such file or directory\n"),
                        1,
                    ),
                )
            } else {
                (
                    "Advancing the task.".to_string(),
                    format!("echo step {position}"),
                    exec_result(&format!("step {position}\n"), "", 0),
                )
            };
            let prev_error = position > 0 && intents[position - 1].is_error();
            StepRecord {
                index: position as u32,
                intent: *intent,
                reasoning,
                command,
                observation,
                critic_verdict: CriticVerdict::Approved,
                recovery: !intent.is_error() && prev_error,
                observation_source: ObservationSource::Simulated,
            }
        })
        .collect();
    let completion_rate = if tests_total == 0 {
        0.0
    } else {
        f64::from(tests_passed) / f64::from(tests_total)
    };
    Trajectory {
        task_id: task_id.into(),
        turn_count: steps.len() as u32,
        approx_token_count: approx_token_count(&steps),
        steps,
        tests_passed,
        tests_total,
        completion_rate,
        observation_source: ObservationSource::Simulated,
    }
}

/// Minimal task metadata for collector runs that never touch a bundle.
pub fn mock_task(id: &str) -> TaskYaml {
    TaskYaml {
        id: id.into(),
        category: "1.1 File and text wrangling".into(),
        tier: "Foundations".into(),
        description: "Count the inventory lines in data/items.txt and record the count.".into(),
        input_requirements: "data/items.txt holds one inventory item name per line.".into(),
        output_requirements: "out/result.txt holds the line count as a single integer.".into(),
        success_criteria: "out/result.txt exists and contains exactly the number of lines in data/items.txt."
            .into(),
        max_agent_timeout_sec: 600,
    }
}

/// Sandbox over the process runtime, rooted in a scratch directory.
pub fn process_sandbox(state_root: &Path, run_id: &str) -> Sandbox {
    Sandbox::new(
        Arc::new(ProcessRuntime::new(state_root.to_path_buf())),
        run_id,
        Duration::from_secs(60),
    )
}

/// Gateway in live mode over the given provider; the cassette store root
/// stays unused in live mode but must exist as a path.
pub fn live_gateway(scratch: &Path, provider: Arc<dyn Provider>) -> Gateway {
    Gateway::new(GatewayMode::Live, CassetteStore::new(scratch.join("cassettes")), Some(provider))
        .expect("live gateway builds")
}
