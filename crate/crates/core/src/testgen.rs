//! Verification suite generation with an execution-grounded judge loop.
//!
//! A generator agent emits pytest files for a task; every candidate suite
//! is dry-run inside a fresh session of the unsolved environment and must
//! fail there (a suite that passes before any work is done verifies
//! nothing). Only suites that clear that gate reach the judge agent, and
//! only judge-approved suites are installed into the bundle. The loop is
//! bounded; a task whose suite never gets approved is dropped.
//!
//! The runner entry point is a fixed script, never model-written: it runs
//! pytest over tests/ and reports machine-readable results on the last
//! stdout line.

use crate::envgen::{validate_rel_path, EnvGenError, EnvironmentBundle, MAX_ARTIFACT_BYTES};
use crate::gateway::{AgentRole, Gateway, Message};
use crate::prompts::{parse_json_reply, LlmCall, PromptError};
use crate::sandbox::{ExecResult, FileToCopy, Sandbox, SandboxError};
use crate::text::tail_lines;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Command that runs a bundle's verification suite inside a session.
pub const RUN_SUITE_COMMAND: &str = "./run-tests.sh";

/// Fixed verification entry point installed alongside generated tests.
/// Prints `PASSED=<k> TOTAL=<n>` as the last stdout line and exits 0 only
/// when the suite is non-empty and fully green. Counts one result per
/// test: the call phase, or a failed setup (error) when the call never
/// ran.
pub const RUNNER_SCRIPT: &str = r#"#!/bin/sh
# Fixed verification entry point. Runs the pytest suite under tests/ and
# reports `PASSED=<k> TOTAL=<n>` on the last stdout line; exits 0 only
# when the suite is non-empty and every test passed.
cd "$(dirname "$0")" || exit 1
python3 -B - <<'PYEOF'
import sys

try:
    import pytest
except ImportError:
    print("PASSED=0 TOTAL=0")
    sys.exit(1)


class Counter:
    def __init__(self):
        self.passed = 0
        self.total = 0

    def pytest_runtest_logreport(self, report):
        if report.when == "call":
            self.total += 1
            if report.passed:
                self.passed += 1
        elif report.when == "setup" and report.failed:
            self.total += 1


counter = Counter()
code = pytest.main(["-q", "--tb=no", "-p", "no:cacheprovider", "tests"], plugins=[counter])
print(f"PASSED={counter.passed} TOTAL={counter.total}")
sys.exit(0 if code == 0 and counter.total > 0 and counter.passed == counter.total else 1)
PYEOF
"#;

/// Parsed verification summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSummary {
    pub passed: u32,
    pub total: u32,
}

impl TestSummary {
    /// Fraction of tests passed; 0 for an empty suite.
    pub fn completion_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            f64::from(self.passed) / f64::from(self.total)
        }
    }
}

/// Parses the `PASSED=<k> TOTAL=<n>` protocol from the last non-empty
/// stdout line. Anything else is a protocol violation, not a zero score.
pub fn parse_summary(stdout: &str) -> Option<TestSummary> {
    let line = stdout.lines().rev().find(|line| !line.trim().is_empty())?;
    let rest = line.trim().strip_prefix("PASSED=")?;
    let (passed, rest) = rest.split_once(' ')?;
    let total = rest.strip_prefix("TOTAL=")?;
    Some(TestSummary { passed: passed.parse().ok()?, total: total.parse().ok()? })
}

/// One generated pytest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFile {
    /// Path relative to the bundle root, always under tests/.
    pub path: String,
    pub content: String,
}

/// An approved verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSuite {
    pub files: Vec<TestFile>,
    /// Test count observed in the dry run on the unsolved environment.
    pub test_count: u32,
    /// Generate-judge rounds consumed, 1-based.
    pub rounds_used: u32,
    /// Dry-run summary; `passed` is necessarily below `total`.
    pub dry_run: TestSummary,
}

#[derive(Debug, Clone)]
pub struct TestGenParams {
    /// Bound on generate-dry-run-judge rounds.
    pub max_rounds: u32,
    pub temperature: f64,
    pub judge_temperature: f64,
    pub max_output_tokens: u32,
    pub reprompt_budget: u32,
}

impl Default for TestGenParams {
    fn default() -> Self {
        TestGenParams {
            max_rounds: 3,
            temperature: 0.7,
            judge_temperature: 0.2,
            max_output_tokens: 8192,
            reprompt_budget: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum TestGenError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("no suite approved for {task_id} after {rounds} round(s): {last_feedback}")]
    NotApproved { task_id: String, rounds: u32, last_feedback: String },
}

#[derive(Debug, Deserialize)]
struct FilesReply {
    files: Vec<TestFile>,
}

#[derive(Debug, Deserialize)]
struct JudgeReply {
    approved: bool,
    #[serde(default)]
    issues: Vec<String>,
}

/// Structural validation of a candidate suite, before anything executes.
pub fn validate_suite_files(files: &[TestFile]) -> Result<(), String> {
    if files.is_empty() {
        return Err("the suite has no files".into());
    }
    let mut seen = BTreeSet::new();
    for file in files {
        validate_rel_path(&file.path)?;
        if !file.path.starts_with("tests/") {
            return Err(format!("{:?} is not under tests/", file.path));
        }
        if !file.path.ends_with(".py") {
            return Err(format!("{:?} is not a Python file", file.path));
        }
        if file.content.trim().is_empty() {
            return Err(format!("{:?} is empty", file.path));
        }
        if file.content.len() > MAX_ARTIFACT_BYTES {
            return Err(format!(
                "{:?} exceeds the {MAX_ARTIFACT_BYTES}-byte cap",
                file.path
            ));
        }
        if !seen.insert(file.path.as_str()) {
            return Err(format!("duplicate path {:?}", file.path));
        }
    }
    Ok(())
}

/// Files to inject into a session so [`RUN_SUITE_COMMAND`] runs this
/// suite: the fixed runner plus every test file.
pub fn suite_copy_files(files: &[TestFile]) -> Vec<FileToCopy> {
    let mut out = vec![FileToCopy {
        path: "run-tests.sh".into(),
        content: RUNNER_SCRIPT.as_bytes().to_vec(),
        executable: true,
    }];
    out.extend(files.iter().map(|file| FileToCopy {
        path: file.path.clone(),
        content: file.content.as_bytes().to_vec(),
        executable: false,
    }));
    out
}

/// Runs a session's verification suite and parses the summary protocol.
pub fn run_suite(
    sandbox: &Sandbox,
    session: &crate::sandbox::Session,
) -> Result<(ExecResult, Option<TestSummary>), SandboxError> {
    let exec = sandbox.exec(session, RUN_SUITE_COMMAND)?;
    let summary = parse_summary(&exec.stdout);
    Ok((exec, summary))
}

fn generator_system_prompt() -> String {
    "You write verification suites for terminal-task environments.\n\
     The environment is a Linux container with the task's files under /workspace. \
     Your suite decides, deterministically, whether the task described below has \
     been completed.\n\
     Rules:\n\
     - Emit pytest test files. Every path must be under tests/ and end in .py.\n\
     - Test observable outcomes: files produced, program output, exit codes. \
       Never test how the work was done.\n\
     - The suite must FAIL on the freshly built environment (task not yet done) \
       and PASS once the task is genuinely complete.\n\
     - No network access, no randomness, no dependence on wall-clock timing.\n\
     Reply with JSON only:\n\
     {\"files\": [{\"path\": \"tests/test_example.py\", \"content\": \"<file text>\"}]}"
        .into()
}

fn judge_system_prompt() -> String {
    "You review a candidate verification suite for a terminal task before it is \
     adopted. Approve only if the tests genuinely discriminate between a solved \
     and an unsolved environment: they must cover every success criterion, test \
     outcomes rather than implementation details, and avoid brittleness such as \
     network access, randomness, or timing assumptions.\n\
     Reply with JSON only: {\"approved\": true|false, \"issues\": [\"...\"]}"
        .into()
}

fn render_files(files: &[TestFile]) -> String {
    let mut out = String::new();
    for file in files {
        out.push_str(&format!("--- {} ---\n{}\n", file.path, file.content));
    }
    out
}

fn generate_files(
    gateway: &Gateway,
    task_id: &str,
    task_yaml_text: &str,
    feedback: Option<&str>,
    params: &TestGenParams,
) -> Result<Vec<TestFile>, PromptError> {
    let call = LlmCall {
        gateway,
        scope: task_id,
        role: AgentRole::TestGenerator,
        temperature: params.temperature,
        max_output_tokens: params.max_output_tokens,
        reprompt_budget: params.reprompt_budget,
    };
    let mut user = format!("Task metadata:\n{task_yaml_text}");
    if let Some(feedback) = feedback {
        user.push_str(&format!(
            "\nThe previous suite was rejected. Address this and regenerate the \
             full suite:\n{feedback}"
        ));
    }
    call.structured(
        vec![Message::system(generator_system_prompt()), Message::user(user)],
        |reply| {
            let parsed: FilesReply = parse_json_reply(reply)?;
            validate_suite_files(&parsed.files)?;
            Ok(parsed.files)
        },
    )
}

fn judge_suite(
    gateway: &Gateway,
    task_id: &str,
    task_yaml_text: &str,
    files: &[TestFile],
    dry_run: &ExecResult,
    params: &TestGenParams,
) -> Result<JudgeReply, PromptError> {
    let call = LlmCall {
        gateway,
        scope: task_id,
        role: AgentRole::Judge,
        temperature: params.judge_temperature,
        max_output_tokens: params.max_output_tokens,
        reprompt_budget: params.reprompt_budget,
    };
    let user = format!(
        "Task metadata:\n{task_yaml_text}\n\
         Candidate suite:\n{}\n\
         Dry run on the unsolved environment (exit {}):\n\
         stdout:\n{}\nstderr:\n{}",
        render_files(files),
        dry_run.exit_code,
        tail_lines(&dry_run.stdout, 40),
        tail_lines(&dry_run.stderr, 40),
    );
    call.structured(
        vec![Message::system(judge_system_prompt()), Message::user(user)],
        |reply| parse_json_reply::<JudgeReply>(reply).map_err(|err| err.to_string()),
    )
}

/// Generates and validates a verification suite for one task.
///
/// Each round: generate files, dry-run them in a fresh session of the
/// unsolved image, reject vacuous or protocol-violating suites
/// structurally, and put the survivors to the judge. Sessions are torn
/// down on every path.
pub fn generate_suite(
    gateway: &Gateway,
    sandbox: &Sandbox,
    image_ref: &str,
    task_id: &str,
    task_yaml_text: &str,
    params: &TestGenParams,
) -> Result<GeneratedSuite, TestGenError> {
    let mut feedback: Option<String> = None;
    for round in 1..=params.max_rounds {
        let files =
            generate_files(gateway, task_id, task_yaml_text, feedback.as_deref(), params)?;
        let mut session = sandbox.open_session(image_ref)?;
        let dry_run = (|| {
            sandbox.copy_in(&session, &suite_copy_files(&files))?;
            sandbox.exec(&session, RUN_SUITE_COMMAND)
        })();
        let teardown = sandbox.teardown(&mut session);
        let dry_run = dry_run?;
        teardown?;
        let summary = parse_summary(&dry_run.stdout);
        let structural_reject = if dry_run.timed_out() {
            Some("the dry run timed out on the unsolved environment".to_string())
        } else {
            match summary {
                None => Some(format!(
                    "the runner produced no `PASSED=<k> TOTAL=<n>` summary line \
                     (stdout tail: {:?}, stderr tail: {:?})",
                    tail_lines(&dry_run.stdout, 5),
                    tail_lines(&dry_run.stderr, 5),
                )),
                Some(summary) if summary.total == 0 => {
                    Some("the suite collected zero tests".to_string())
                }
                Some(_) if dry_run.exit_code == 0 => Some(
                    "the suite passed on the freshly built environment, where the \
                     task is not yet done, so it cannot be verifying the work"
                        .to_string(),
                ),
                Some(_) => None,
            }
        };
        if let Some(reason) = structural_reject {
            tracing::warn!(task_id, round, reason, "suite rejected before judging");
            feedback = Some(reason);
            continue;
        }
        let summary = summary.expect("structural gate guarantees a summary");
        let verdict = judge_suite(gateway, task_id, task_yaml_text, &files, &dry_run, params)?;
        if verdict.approved {
            return Ok(GeneratedSuite {
                files,
                test_count: summary.total,
                rounds_used: round,
                dry_run: summary,
            });
        }
        let issues = if verdict.issues.is_empty() {
            "the judge rejected the suite without naming issues".to_string()
        } else {
            verdict.issues.join("; ")
        };
        tracing::warn!(task_id, round, issues, "judge rejected suite");
        feedback = Some(issues);
    }
    Err(TestGenError::NotApproved {
        task_id: task_id.to_string(),
        rounds: params.max_rounds,
        last_feedback: feedback.unwrap_or_default(),
    })
}

/// Installs an approved suite into a bundle: replaces the placeholder
/// runner with the fixed one and rewrites tests/ from scratch.
pub fn install_suite(
    bundle: &EnvironmentBundle,
    suite: &GeneratedSuite,
) -> Result<(), EnvGenError> {
    let tests_dir = bundle.tests_dir();
    if tests_dir.exists() {
        std::fs::remove_dir_all(&tests_dir)
            .map_err(|source| EnvGenError::Io { path: tests_dir.clone(), source })?;
    }
    std::fs::create_dir_all(&tests_dir)
        .map_err(|source| EnvGenError::Io { path: tests_dir.clone(), source })?;
    let runner = bundle.runner_path();
    std::fs::write(&runner, RUNNER_SCRIPT)
        .map_err(|source| EnvGenError::Io { path: runner.clone(), source })?;
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&runner, std::fs::Permissions::from_mode(0o755))
            .map_err(|source| EnvGenError::Io { path: runner.clone(), source })?;
    }
    for file in &suite.files {
        let path = bundle.root.join(&file.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|source| EnvGenError::Io { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(&path, &file.content)
            .map_err(|source| EnvGenError::Io { path, source })?;
    }
    Ok(())
}
