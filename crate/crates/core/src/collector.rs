//! Error-injected trajectory collection.
//!
//! Each step draws an intent signal: with probability epsilon the
//! generator is directed to make a plausible mistake from a five-category
//! taxonomy, otherwise to advance the task. A correct step sampled right
//! after an error step carries a recovery obligation: diagnose the failure
//! before proceeding. Every candidate executes first (really, or through
//! an observation-synthesis agent) and is then validated by a critic;
//! rejected candidates are discarded by rolling the session back and
//! replaying the approved history. Injection directives live only in
//! ephemeral prompts, never in the persisted records.
//!
//! Termination: the generator may declare completion with a fenced DONE,
//! which ends the trajectory without appending a step; errors are never
//! injected into that final declared-done turn, and completion is refused
//! while a recovery obligation is pending.

use crate::agent::{parse_turn, render_observation, AgentAction, SOLVING_PROTOCOL};
use crate::envgen::TaskYaml;
use crate::gateway::{AgentRole, Gateway, Message};
use crate::prompts::{parse_json_reply, LlmCall, PromptError};
use crate::sandbox::{ExecResult, Sandbox, SandboxError, Session};
use crate::testgen::{run_suite, suite_copy_files, TestFile};
use crate::text::tail_lines;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The five injectable mistake categories, in their canonical order.
pub const ERROR_CATEGORIES: [ErrorCategory; 5] = [
    ErrorCategory::AnalysisError,
    ErrorCategory::CommandError,
    ErrorCategory::Hallucination,
    ErrorCategory::RequirementViolation,
    ErrorCategory::VerificationFailure,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Misreading the environment state and acting on the misreading.
    AnalysisError,
    /// A command with a realistic defect: wrong flag, path, or syntax.
    CommandError,
    /// Acting on files, tools, or outputs that do not exist.
    Hallucination,
    /// A step that conflicts with the task's stated requirements.
    RequirementViolation,
    /// Checking the wrong thing, or a check that cannot catch the problem.
    VerificationFailure,
}

impl ErrorCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::AnalysisError => "analysis_error",
            ErrorCategory::CommandError => "command_error",
            ErrorCategory::Hallucination => "hallucination",
            ErrorCategory::RequirementViolation => "requirement_violation",
            ErrorCategory::VerificationFailure => "verification_failure",
        }
    }
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum IntentKind {
    Correct,
    Error,
}

/// Per-step control signal: advance the task, or inject a categorized
/// mistake. The category is present exactly when the kind is error;
/// construction and deserialization both enforce it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "IntentSignalWire", into = "IntentSignalWire")]
pub struct IntentSignal {
    kind: IntentKind,
    error_category: Option<ErrorCategory>,
}

#[derive(Serialize, Deserialize)]
struct IntentSignalWire {
    kind: IntentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_category: Option<ErrorCategory>,
}

impl TryFrom<IntentSignalWire> for IntentSignal {
    type Error = String;

    fn try_from(wire: IntentSignalWire) -> Result<Self, String> {
        match (wire.kind, wire.error_category) {
            (IntentKind::Correct, None) => Ok(IntentSignal::correct()),
            (IntentKind::Error, Some(category)) => Ok(IntentSignal::error(category)),
            (IntentKind::Correct, Some(_)) => {
                Err("a correct intent cannot carry an error category".into())
            }
            (IntentKind::Error, None) => Err("an error intent needs an error category".into()),
        }
    }
}

impl From<IntentSignal> for IntentSignalWire {
    fn from(signal: IntentSignal) -> Self {
        IntentSignalWire { kind: signal.kind, error_category: signal.error_category }
    }
}

impl IntentSignal {
    pub fn correct() -> Self {
        IntentSignal { kind: IntentKind::Correct, error_category: None }
    }

    pub fn error(category: ErrorCategory) -> Self {
        IntentSignal { kind: IntentKind::Error, error_category: Some(category) }
    }

    pub fn is_error(&self) -> bool {
        self.kind == IntentKind::Error
    }

    pub fn error_category(&self) -> Option<ErrorCategory> {
        self.error_category
    }
}

/// Deterministic per-task intent stream. The stream is a pure function of
/// (run seed, task id), so a trajectory's intents can be re-derived
/// exactly by anyone holding the config.
pub struct IntentSampler {
    rng: ChaCha8Rng,
}

impl IntentSampler {
    pub fn new(rng_seed: u64, task_id: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(rng_seed.to_le_bytes());
        hasher.update(task_id.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        IntentSampler { rng: ChaCha8Rng::from_seed(seed) }
    }

    /// Draws one intent: error with probability `epsilon`, then a category
    /// uniform over the five. Advances the stream deterministically.
    pub fn sample(&mut self, epsilon: f64) -> IntentSignal {
        assert!((0.0..=1.0).contains(&epsilon), "epsilon must be in [0, 1]");
        let u: f64 = self.rng.gen();
        if u < epsilon {
            let category = ERROR_CATEGORIES[self.rng.gen_range(0..ERROR_CATEGORIES.len())];
            IntentSignal::error(category)
        } else {
            IntentSignal::correct()
        }
    }
}

/// Where a trajectory's observations came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    Real,
    Simulated,
}

/// How a step cleared the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CriticVerdict {
    /// First candidate accepted.
    Approved,
    /// Accepted after `count` regenerations (or force-accepted at the cap).
    Regenerated { count: u32 },
}

/// One accepted step of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: u32,
    pub intent: IntentSignal,
    pub reasoning: String,
    pub command: String,
    pub observation: ExecResult,
    pub critic_verdict: CriticVerdict,
    /// True exactly when this step is correct-intent and the previous
    /// step's intent was error: the step that diagnoses and repairs.
    pub recovery: bool,
    pub observation_source: ObservationSource,
}

/// A complete collected trajectory, as persisted in the dataset store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub tests_passed: u32,
    pub tests_total: u32,
    pub completion_rate: f64,
    pub turn_count: u32,
    pub approx_token_count: u64,
    pub observation_source: ObservationSource,
}

impl Trajectory {
    /// Checks the record invariants: step indexing, turn count, recovery
    /// labeling, observation-source homogeneity, error-manifest soundness,
    /// and completion-rate arithmetic.
    pub fn validate(&self) -> Result<(), String> {
        if self.turn_count as usize != self.steps.len() {
            return Err(format!(
                "turn_count {} does not match {} steps",
                self.turn_count,
                self.steps.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.completion_rate) {
            return Err(format!("completion_rate {} out of range", self.completion_rate));
        }
        let expected_rate = if self.tests_total == 0 {
            0.0
        } else {
            f64::from(self.tests_passed) / f64::from(self.tests_total)
        };
        if (self.completion_rate - expected_rate).abs() > 1e-9 {
            return Err(format!(
                "completion_rate {} does not equal {}/{}",
                self.completion_rate, self.tests_passed, self.tests_total
            ));
        }
        for (position, step) in self.steps.iter().enumerate() {
            if step.index as usize != position {
                return Err(format!("step at position {position} has index {}", step.index));
            }
            if step.observation_source != self.observation_source {
                return Err(format!("step {position} has a foreign observation source"));
            }
            if step.command.trim().is_empty() {
                return Err(format!("step {position} has an empty command"));
            }
            let prev_error =
                position > 0 && self.steps[position - 1].intent.is_error();
            let expected_recovery = !step.intent.is_error() && prev_error;
            if step.recovery != expected_recovery {
                return Err(format!(
                    "step {position} recovery flag is {}, expected {expected_recovery}",
                    step.recovery
                ));
            }
            if step.intent.is_error()
                && step.observation.stderr.is_empty()
                && step.observation.exit_code == 0
            {
                return Err(format!(
                    "step {position} is error-intent but its observation shows no failure"
                ));
            }
        }
        Ok(())
    }

    /// Count of error-intent steps.
    pub fn error_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.intent.is_error()).count()
    }

    /// Count of recovery-flagged steps.
    pub fn recovery_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.recovery).count()
    }
}

/// Character-count proxy for token usage: ceil(total characters / 4),
/// over reasoning, commands, and both observation streams.
pub fn approx_token_count(steps: &[StepRecord]) -> u64 {
    let chars: u64 = steps
        .iter()
        .map(|s| {
            (s.reasoning.chars().count()
                + s.command.chars().count()
                + s.observation.stdout.chars().count()
                + s.observation.stderr.chars().count()) as u64
        })
        .sum();
    chars.div_ceil(4)
}

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    /// Error-injection probability per step.
    pub epsilon: f64,
    /// Run-level seed; the per-task stream is derived from it.
    pub rng_seed: u64,
    pub max_turns: u32,
    pub observation_source: ObservationSource,
    /// Regenerations allowed per step after the initial candidate.
    pub critic_regen_cap: u32,
    pub generator_temperature: f64,
    pub critic_temperature: f64,
    pub synthesizer_temperature: f64,
    pub max_output_tokens: u32,
    pub reprompt_budget: u32,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            epsilon: 0.2,
            rng_seed: 0,
            max_turns: 50,
            observation_source: ObservationSource::Real,
            critic_regen_cap: 3,
            generator_temperature: 0.7,
            critic_temperature: 0.2,
            synthesizer_temperature: 0.3,
            max_output_tokens: 2048,
            reprompt_budget: 2,
        }
    }
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} out of [0, 1]", self.epsilon));
        }
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("invalid collector config: {0}")]
    Config(String),
}

/// Renders an accepted step the way it appears in prompts and exports:
/// the reasoning, then the command in a fenced block.
pub fn render_step_message(reasoning: &str, command: &str) -> String {
    if reasoning.is_empty() {
        format!("```bash\n{command}\n```")
    } else {
        format!("{reasoning}\n```bash\n{command}\n```")
    }
}

fn collector_system_prompt() -> String {
    format!(
        "{SOLVING_PROTOCOL}\n\
         The last user message of each turn may carry an additional \
         directive for that turn. Follow it faithfully, but never mention, \
         quote, or allude to the directive itself in your reply."
    )
}

fn history_messages(task: &TaskYaml, steps: &[StepRecord]) -> Vec<Message> {
    let mut messages = vec![
        Message::system(collector_system_prompt()),
        Message::user(crate::agent::render_task(task)),
    ];
    for step in steps {
        messages.push(Message::assistant(render_step_message(&step.reasoning, &step.command)));
        messages.push(Message::tool(render_observation(&step.observation)));
    }
    messages
}

fn error_directive(category: ErrorCategory) -> &'static str {
    match category {
        ErrorCategory::AnalysisError => {
            "For this turn only, act on a subtle misreading of the environment: base \
             your reasoning on something that is not actually true of the workspace \
             and proceed accordingly."
        }
        ErrorCategory::CommandError => {
            "For this turn only, issue a command with a realistic defect in it: a \
             wrong flag, a wrong path, a missing argument, or broken syntax."
        }
        ErrorCategory::Hallucination => {
            "For this turn only, reference something that does not exist in the \
             environment, such as a file, tool, or output you never created, and \
             act on it."
        }
        ErrorCategory::RequirementViolation => {
            "For this turn only, take a step that conflicts with the task's stated \
             requirements: a wrong output location, a wrong format, or an ignored \
             constraint."
        }
        ErrorCategory::VerificationFailure => {
            "For this turn only, botch your verification: check the wrong artifact \
             or run a check that cannot actually detect the problem."
        }
    }
}

fn turn_directive(
    intent: &IntentSignal,
    recovery_required: bool,
    prior_stderr: Option<&str>,
) -> String {
    match intent.error_category() {
        Some(category) => format!(
            "{} The mistake must surface in the command's output: an error message \
             on stderr or a non-zero exit code. Keep your reasoning natural, as if \
             you believed the step was right.",
            error_directive(category)
        ),
        None if recovery_required => {
            let stderr = prior_stderr.unwrap_or("");
            let excerpt = if stderr.is_empty() {
                String::from("(the failure produced no stderr; go by the exit code)")
            } else {
                tail_lines(stderr, 10)
            };
            format!(
                "Your previous command ran into a problem. Its stderr was:\n{excerpt}\n\
                 Diagnose what went wrong, reference the failure explicitly in your \
                 reasoning, and issue a corrective command."
            )
        }
        None => "Take the best next step toward completing the task. When the task \
                 is fully complete and verified, reply with a fenced block \
                 containing only DONE."
            .to_string(),
    }
}

struct StepCandidate {
    reasoning: String,
    action: AgentAction,
}

fn generate_candidate(
    gateway: &Gateway,
    task: &TaskYaml,
    steps: &[StepRecord],
    intent: &IntentSignal,
    recovery_required: bool,
    feedback: Option<&str>,
    config: &CollectorConfig,
) -> Result<StepCandidate, PromptError> {
    let call = LlmCall {
        gateway,
        scope: &task.id,
        role: AgentRole::StepGenerator,
        temperature: config.generator_temperature,
        max_output_tokens: config.max_output_tokens,
        reprompt_budget: config.reprompt_budget,
    };
    let prior_stderr = steps.last().map(|s| s.observation.stderr.as_str());
    let mut directive = turn_directive(intent, recovery_required, prior_stderr);
    if let Some(feedback) = feedback {
        directive.push_str(&format!(
            "\nYour previous attempt at this turn was rejected: {feedback}\nProduce \
             a fresh attempt."
        ));
    }
    let mut messages = history_messages(task, steps);
    messages.push(Message::user(directive));
    call.structured(messages, |reply| {
        parse_turn(reply).map(|turn| StepCandidate { reasoning: turn.reasoning, action: turn.action })
    })
}

#[derive(Debug, Deserialize)]
struct CriticReply {
    approved: bool,
    #[serde(default)]
    feedback: String,
}

fn critic_expectation(intent: &IntentSignal, recovery_required: bool) -> String {
    match intent.error_category() {
        Some(category) => format!(
            "This step was meant to exhibit a {category} mistake. Approve only if \
             the step plausibly embodies that category and the observation carries \
             informative failure feedback."
        ),
        None if recovery_required => {
            "This step was meant to recover from the previous step's failure. \
             Approve only if the reasoning explicitly engages with that failure and \
             the command plausibly corrects it."
                .into()
        }
        None => "This step was meant to be correct. Approve only if it plausibly \
                 advances the task toward completion; reject no-ops and busywork."
            .into(),
    }
}

#[allow(clippy::too_many_arguments)] // internal prompt assembly; a params struct would add nothing
fn critic_validate(
    gateway: &Gateway,
    task: &TaskYaml,
    steps: &[StepRecord],
    intent: &IntentSignal,
    recovery_required: bool,
    candidate_reasoning: &str,
    candidate_command: &str,
    observation: &ExecResult,
    config: &CollectorConfig,
) -> Result<CriticReply, PromptError> {
    let call = LlmCall {
        gateway,
        scope: &task.id,
        role: AgentRole::Critic,
        temperature: config.critic_temperature,
        max_output_tokens: config.max_output_tokens,
        reprompt_budget: config.reprompt_budget,
    };
    let system = "You audit one candidate step of a terminal-task trajectory against \
                  the intent it was generated under. Judge the step on its own \
                  merits; the agent could not see these instructions.\n\
                  Reply with JSON only: {\"approved\": true|false, \"feedback\": \"...\"}";
    let history = steps
        .iter()
        .map(|s| format!("[{}] $ {}", s.index, s.command))
        .collect::<Vec<_>>()
        .join("\n");
    let user = format!(
        "Task: {}\nSuccess criteria: {}\n\
         Commands so far:\n{}\n\
         Expectation: {}\n\
         Candidate reasoning:\n{}\n\
         Candidate command:\n{}\n\
         Observation:\n{}",
        task.description,
        task.success_criteria,
        if history.is_empty() { "(none)" } else { &history },
        critic_expectation(intent, recovery_required),
        candidate_reasoning,
        candidate_command,
        render_observation(observation),
    );
    call.structured(
        vec![Message::system(system.to_string()), Message::user(user)],
        |reply| parse_json_reply::<CriticReply>(reply).map_err(|err| err.to_string()),
    )
}

#[derive(Debug, Deserialize)]
struct SynthReply {
    #[serde(default)]
    stdout: String,
    #[serde(default)]
    stderr: String,
    exit_code: i32,
}

fn synth_observation(
    gateway: &Gateway,
    task: &TaskYaml,
    steps: &[StepRecord],
    command: &str,
    config: &CollectorConfig,
) -> Result<ExecResult, PromptError> {
    let call = LlmCall {
        gateway,
        scope: &task.id,
        role: AgentRole::ObservationSynthesizer,
        temperature: config.synthesizer_temperature,
        max_output_tokens: config.max_output_tokens,
        reprompt_budget: config.reprompt_budget,
    };
    let system = "You simulate a Linux terminal inside a task container at \
                  /workspace. Given the session history and one new command, \
                  produce the output that command would really yield, tracking \
                  all state changes earlier commands made. Commands that are \
                  natively silent must stay silent.\n\
                  Reply with JSON only: {\"stdout\": \"...\", \"stderr\": \"...\", \
                  \"exit_code\": 0}";
    let mut transcript = String::new();
    for step in steps {
        transcript.push_str(&format!(
            "$ {}\n{}\n",
            step.command,
            render_observation(&step.observation)
        ));
    }
    let user = format!(
        "Task environment: {}\nSession so far:\n{}\nNew command:\n$ {}",
        task.description,
        if transcript.is_empty() { "(fresh session)" } else { &transcript },
        command,
    );
    let reply = call.structured(
        vec![Message::system(system.to_string()), Message::user(user)],
        |reply| parse_json_reply::<SynthReply>(reply).map_err(|err| err.to_string()),
    )?;
    Ok(ExecResult {
        stdout: reply.stdout,
        stderr: reply.stderr,
        exit_code: reply.exit_code,
        duration_secs: 0.0,
        truncated: false,
    })
}

/// Execution layer for one trajectory: a real session, or the
/// observation-synthesis agent. Real rejections roll back by replaying
/// the approved command history into a fresh session.
enum Executor<'a> {
    Real { sandbox: &'a Sandbox, image_ref: &'a str, session: Session },
    Simulated,
}

impl<'a> Executor<'a> {
    fn open(
        sandbox: &'a Sandbox,
        image_ref: &'a str,
        source: ObservationSource,
    ) -> Result<Self, SandboxError> {
        match source {
            ObservationSource::Real => Ok(Executor::Real {
                sandbox,
                image_ref,
                session: sandbox.open_session(image_ref)?,
            }),
            ObservationSource::Simulated => Ok(Executor::Simulated),
        }
    }

    fn observe(
        &mut self,
        gateway: &Gateway,
        task: &TaskYaml,
        steps: &[StepRecord],
        command: &str,
        config: &CollectorConfig,
    ) -> Result<ExecResult, CollectError> {
        match self {
            Executor::Real { sandbox, session, .. } => {
                Ok(sandbox.exec(session, command)?)
            }
            Executor::Simulated => {
                Ok(synth_observation(gateway, task, steps, command, config)?)
            }
        }
    }

    /// Discards the effects of a rejected candidate: tears the session
    /// down and replays the approved commands in order.
    fn rollback(&mut self, steps: &[StepRecord]) -> Result<(), SandboxError> {
        match self {
            Executor::Real { sandbox, image_ref, session } => {
                sandbox.teardown(session)?;
                *session = sandbox.open_session(image_ref)?;
                for step in steps {
                    sandbox.exec(session, &step.command)?;
                }
                Ok(())
            }
            Executor::Simulated => Ok(()),
        }
    }

    /// Runs the verification suite once (real mode) and returns
    /// (tests_passed, tests_total). Simulated mode never executes
    /// anything, so it reports an unverified (0, 0).
    fn verify(&mut self, suite: &[TestFile]) -> Result<(u32, u32), SandboxError> {
        match self {
            Executor::Real { sandbox, session, .. } => {
                sandbox.copy_in(session, &suite_copy_files(suite))?;
                let (exec, summary) = run_suite(sandbox, session)?;
                match summary {
                    Some(summary) => Ok((summary.passed, summary.total)),
                    None => {
                        tracing::warn!(
                            exit_code = exec.exit_code,
                            "verification produced no summary line; scoring zero"
                        );
                        Ok((0, 0))
                    }
                }
            }
            Executor::Simulated => Ok((0, 0)),
        }
    }

    fn close(&mut self) -> Result<(), SandboxError> {
        match self {
            Executor::Real { sandbox, session, .. } => sandbox.teardown(session),
            Executor::Simulated => Ok(()),
        }
    }
}

/// Collects one trajectory for a task whose bundle built and whose suite
/// was approved. See the module docs for the step loop; after the loop,
/// the suite runs once and the trajectory records its result, negative
/// outcomes included.
pub fn collect_trajectory(
    gateway: &Gateway,
    sandbox: &Sandbox,
    image_ref: &str,
    task: &TaskYaml,
    suite: &[TestFile],
    config: &CollectorConfig,
) -> Result<Trajectory, CollectError> {
    config.validate().map_err(CollectError::Config)?;
    let mut sampler = IntentSampler::new(config.rng_seed, &task.id);
    let mut executor = Executor::open(sandbox, image_ref, config.observation_source)?;
    let result = collect_steps(gateway, task, &mut executor, &mut sampler, config);
    let steps = match result {
        Ok(steps) => steps,
        Err(err) => {
            let _ = executor.close();
            return Err(err);
        }
    };
    let verified = executor.verify(suite);
    let closed = executor.close();
    let (tests_passed, tests_total) = verified?;
    closed?;
    let completion_rate = if tests_total == 0 {
        0.0
    } else {
        f64::from(tests_passed) / f64::from(tests_total)
    };
    let trajectory = Trajectory {
        task_id: task.id.clone(),
        turn_count: steps.len() as u32,
        approx_token_count: approx_token_count(&steps),
        steps,
        tests_passed,
        tests_total,
        completion_rate,
        observation_source: config.observation_source,
    };
    debug_assert_eq!(trajectory.validate(), Ok(()));
    Ok(trajectory)
}

fn collect_steps(
    gateway: &Gateway,
    task: &TaskYaml,
    executor: &mut Executor<'_>,
    sampler: &mut IntentSampler,
    config: &CollectorConfig,
) -> Result<Vec<StepRecord>, CollectError> {
    let mut steps: Vec<StepRecord> = Vec::new();
    'turns: for _ in 0..config.max_turns {
        let mut intent = sampler.sample(config.epsilon);
        let prev_error = steps.last().map(|s| s.intent.is_error()).unwrap_or(false);
        let mut recovery_required = prev_error && !intent.is_error();
        let mut regen_count = 0u32;
        let mut feedback: Option<String> = None;
        loop {
            let candidate = generate_candidate(
                gateway,
                task,
                &steps,
                &intent,
                recovery_required,
                feedback.as_deref(),
                config,
            )?;
            let command = match candidate.action {
                AgentAction::Done => {
                    if recovery_required {
                        // A sampled correct step after an error must
                        // recover, not declare completion.
                        if regen_count >= config.critic_regen_cap {
                            tracing::warn!(
                                task_id = %task.id,
                                "generator insists on finishing mid-failure; ending the trajectory"
                            );
                            break 'turns;
                        }
                        regen_count += 1;
                        feedback = Some(
                            "the previous command failed and has not been addressed; \
                             recover from it before declaring completion"
                                .into(),
                        );
                        continue;
                    }
                    // Errors are never injected into the declared-done
                    // turn; the trajectory simply ends here.
                    break 'turns;
                }
                AgentAction::Command(command) => command,
            };
            let observation =
                executor.observe(gateway, task, &steps, &command, config)?;
            let rejection = if intent.is_error()
                && observation.stderr.is_empty()
                && observation.exit_code == 0
            {
                Some(
                    "the command succeeded silently; an injected mistake must surface \
                     as an error message on stderr or a non-zero exit code"
                        .to_string(),
                )
            } else {
                let verdict = critic_validate(
                    gateway,
                    task,
                    &steps,
                    &intent,
                    recovery_required,
                    &candidate.reasoning,
                    &command,
                    &observation,
                    config,
                )?;
                if verdict.approved {
                    None
                } else if verdict.feedback.is_empty() {
                    Some("the critic rejected the step without naming issues".to_string())
                } else {
                    Some(verdict.feedback)
                }
            };
            match rejection {
                None => {
                    let critic_verdict = if regen_count == 0 {
                        CriticVerdict::Approved
                    } else {
                        CriticVerdict::Regenerated { count: regen_count }
                    };
                    steps.push(StepRecord {
                        index: steps.len() as u32,
                        intent,
                        reasoning: candidate.reasoning,
                        command,
                        observation,
                        critic_verdict,
                        recovery: recovery_required,
                        observation_source: config.observation_source,
                    });
                    continue 'turns;
                }
                Some(reason) if regen_count < config.critic_regen_cap => {
                    regen_count += 1;
                    executor.rollback(&steps)?;
                    tracing::debug!(task_id = %task.id, reason, "step candidate rejected");
                    feedback = Some(reason);
                }
                Some(reason) => {
                    if intent.is_error() {
                        // Cap exhausted on an injected error: downgrade to
                        // a correct step with a fresh budget. The recovery
                        // obligation is re-derived so the record invariant
                        // holds for the downgraded step.
                        tracing::warn!(
                            task_id = %task.id,
                            step = steps.len(),
                            category = %intent.error_category().expect("error intent").as_str(),
                            "error injection never manifested; downgrading step to correct intent"
                        );
                        executor.rollback(&steps)?;
                        intent = IntentSignal::correct();
                        recovery_required = prev_error;
                        regen_count = 0;
                        feedback = None;
                    } else {
                        // Cap exhausted on a correct step: keep the final
                        // candidate rather than losing the trajectory. Its
                        // execution already happened, so no rollback.
                        tracing::warn!(
                            task_id = %task.id,
                            step = steps.len(),
                            reason,
                            "critic cap exhausted; force-accepting the last candidate"
                        );
                        steps.push(StepRecord {
                            index: steps.len() as u32,
                            intent,
                            reasoning: candidate.reasoning,
                            command,
                            observation,
                            critic_verdict: CriticVerdict::Regenerated { count: regen_count },
                            recovery: recovery_required,
                            observation_source: config.observation_source,
                        });
                        continue 'turns;
                    }
                }
            }
        }
    }
    Ok(steps)
}
