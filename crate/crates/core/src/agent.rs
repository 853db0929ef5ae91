//! The terminal agent loop: one command per turn, observation fed back,
//! explicit completion signal.
//!
//! This is both the solver used to estimate task pass rates and the
//! protocol layer the trajectory collector builds on: turn parsing and
//! observation rendering live here so collected data and solver behavior
//! cannot drift apart.

use crate::collector::{
    approx_token_count, CriticVerdict, IntentSignal, ObservationSource, StepRecord, Trajectory,
};
use crate::envgen::TaskYaml;
use crate::gateway::{AgentRole, Gateway, Message};
use crate::prompts::{single_fenced_block, LlmCall, PromptError};
use crate::sandbox::{ExecResult, Sandbox, SandboxError, Session};
use crate::testgen::{run_suite, suite_copy_files, TestFile, TestSummary};
use crate::text::truncate_middle;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Completion signal the agent emits instead of a command.
pub const DONE_SIGNAL: &str = "DONE";

/// Per-stream byte budget for observations rendered into the prompt.
pub const OBS_HEAD_BYTES: usize = 2048;
pub const OBS_TAIL_BYTES: usize = 2048;

/// What one parsed agent reply asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentAction {
    Command(String),
    Done,
}

/// A parsed agent reply: free-text reasoning plus exactly one action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentTurn {
    pub reasoning: String,
    pub action: AgentAction,
}

/// Parses an agent reply. The protocol requires exactly one fenced block
/// holding either a shell command or the completion signal; the text
/// before the block is the reasoning.
pub fn parse_turn(reply: &str) -> Result<AgentTurn, String> {
    let block = single_fenced_block(reply)?;
    let reasoning = reply.split("```").next().unwrap_or("").trim().to_string();
    let content = block.content.trim();
    if content.is_empty() {
        return Err("the fenced block is empty; put a command or DONE in it".into());
    }
    let action = if content == DONE_SIGNAL {
        AgentAction::Done
    } else {
        AgentAction::Command(block.content.trim_end().to_string())
    };
    Ok(AgentTurn { reasoning, action })
}

/// Renders an execution result as the observation fed back to the agent.
/// Long streams are trimmed in the middle so both the command echo at the
/// top and the error at the bottom survive.
pub fn render_observation(result: &ExecResult) -> String {
    let stream = |text: &str| {
        if text.is_empty() {
            "[empty]".to_string()
        } else {
            truncate_middle(text, OBS_HEAD_BYTES, OBS_TAIL_BYTES)
        }
    };
    let timeout_note = if result.timed_out() { " (timed out)" } else { "" };
    format!(
        "exit_code: {}{}\nstdout:\n{}\nstderr:\n{}",
        result.exit_code,
        timeout_note,
        stream(&result.stdout),
        stream(&result.stderr),
    )
}

/// The turn protocol shared by the solver and the trajectory collector,
/// so collected data and solver behavior cannot drift apart.
pub(crate) const SOLVING_PROTOCOL: &str =
    "You are an autonomous engineer working in a Linux container at \
     /workspace. Solve the task below from the terminal.\n\
     Protocol, every turn:\n\
     1. Briefly state your reasoning as plain text.\n\
     2. Emit exactly one fenced code block containing exactly one shell \
        command to run (pipelines and heredocs are fine).\n\
     After each command you receive its exit code, stdout, and stderr. \
     When the task is fully complete, reply with a fenced block containing \
     only DONE.";

fn agent_system_prompt() -> String {
    SOLVING_PROTOCOL.into()
}

pub(crate) fn render_task(task: &TaskYaml) -> String {
    format!(
        "Task: {}\nInputs: {}\nExpected outputs: {}\nSuccess criteria: {}",
        task.description, task.input_requirements, task.output_requirements, task.success_criteria,
    )
}

#[derive(Debug, Clone)]
pub struct AgentParams {
    pub max_turns: u32,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub reprompt_budget: u32,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            max_turns: 50,
            temperature: 0.6,
            max_output_tokens: 2048,
            reprompt_budget: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

/// Record of one solver run. Steps carry the full trajectory schema with
/// every intent correct: the plain solver injects nothing and needs no
/// critic, so each step is approved as generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRunReport {
    /// True if the agent declared completion within the turn budget.
    pub done: bool,
    pub turns_used: u32,
    pub steps: Vec<StepRecord>,
}

impl AgentRunReport {
    pub fn commands(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.command.as_str()).collect()
    }
}

/// Runs the agent loop in an existing session until it declares DONE or
/// the turn budget runs out. The session is left as the agent left it so
/// the caller can verify the work.
pub fn run_agent(
    gateway: &Gateway,
    sandbox: &Sandbox,
    session: &Session,
    task: &TaskYaml,
    params: &AgentParams,
) -> Result<AgentRunReport, AgentError> {
    let call = LlmCall {
        gateway,
        scope: &task.id,
        role: AgentRole::StepGenerator,
        temperature: params.temperature,
        max_output_tokens: params.max_output_tokens,
        reprompt_budget: params.reprompt_budget,
    };
    let mut messages = vec![
        Message::system(agent_system_prompt()),
        Message::user(render_task(task)),
    ];
    let mut steps: Vec<StepRecord> = Vec::new();
    for turn in 1..=params.max_turns {
        let (raw, parsed) = call.structured(messages.clone(), |reply| {
            parse_turn(reply).map(|turn| (reply.to_string(), turn))
        })?;
        messages.push(Message::assistant(raw));
        match parsed.action {
            AgentAction::Done => {
                return Ok(AgentRunReport { done: true, turns_used: turn, steps });
            }
            AgentAction::Command(command) => {
                let exec = sandbox.exec(session, &command)?;
                messages.push(Message::tool(render_observation(&exec)));
                steps.push(StepRecord {
                    index: steps.len() as u32,
                    intent: IntentSignal::correct(),
                    reasoning: parsed.reasoning,
                    command,
                    observation: exec,
                    critic_verdict: CriticVerdict::Approved,
                    recovery: false,
                    observation_source: ObservationSource::Real,
                });
            }
        }
    }
    tracing::warn!(task_id = %task.id, "agent exhausted its turn budget");
    Ok(AgentRunReport { done: false, turns_used: params.max_turns, steps })
}

/// Outcome of one solve-and-verify run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// True iff the verification suite exited 0 after the agent finished.
    pub solved: bool,
    pub summary: Option<TestSummary>,
    pub agent: AgentRunReport,
    /// The run as a persistable trajectory record.
    pub trajectory: Trajectory,
}

/// Runs the agent once in a fresh session of `image_ref`, then injects
/// the verification suite and scores the result. Pass/fail is binary:
/// solved means the suite exited 0.
pub fn solve_once(
    gateway: &Gateway,
    sandbox: &Sandbox,
    image_ref: &str,
    task: &TaskYaml,
    suite: &[TestFile],
    params: &AgentParams,
) -> Result<SolveReport, AgentError> {
    let mut session = sandbox.open_session(image_ref)?;
    let result = (|| {
        let agent = run_agent(gateway, sandbox, &session, task, params)?;
        sandbox.copy_in(&session, &suite_copy_files(suite))?;
        let (exec, summary) = run_suite(sandbox, &session)?;
        Ok::<_, AgentError>((agent, exec, summary))
    })();
    let teardown = sandbox.teardown(&mut session);
    let (agent, exec, summary) = result?;
    teardown?;
    let (tests_passed, tests_total) = summary.map(|s| (s.passed, s.total)).unwrap_or((0, 0));
    let completion_rate = if tests_total == 0 {
        0.0
    } else {
        f64::from(tests_passed) / f64::from(tests_total)
    };
    let trajectory = Trajectory {
        task_id: task.id.clone(),
        turn_count: agent.steps.len() as u32,
        approx_token_count: approx_token_count(&agent.steps),
        steps: agent.steps.clone(),
        tests_passed,
        tests_total,
        completion_rate,
        observation_source: ObservationSource::Real,
    };
    Ok(SolveReport { solved: exec.exit_code == 0, summary, agent, trajectory })
}

/// Aggregate over repeated solve runs of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub runs: u32,
    pub solved: u32,
    /// Mean pass rate over the runs.
    pub pass_rate: f64,
}

/// Estimates a task's pass rate by running the solver `runs` times.
pub fn solve_rate(
    gateway: &Gateway,
    sandbox: &Sandbox,
    image_ref: &str,
    task: &TaskYaml,
    suite: &[TestFile],
    runs: u32,
    params: &AgentParams,
) -> Result<SolveStats, AgentError> {
    assert!(runs >= 1, "pass-rate estimation needs at least one run");
    let mut solved = 0;
    for _ in 0..runs {
        if solve_once(gateway, sandbox, image_ref, task, suite, params)?.solved {
            solved += 1;
        }
    }
    Ok(SolveStats { runs, solved, pass_rate: f64::from(solved) / f64::from(runs) })
}
