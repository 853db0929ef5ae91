//! Sandboxed execution for task environments.
//!
//! A [`ContainerRuntime`] abstracts image builds and per-session command
//! execution. Two backends ship: [`DockerRuntime`] speaks the daemon API
//! over its unix socket, and [`ProcessRuntime`] approximates a container
//! with per-session workspace directories and local bash, which keeps the
//! pipeline runnable where no daemon exists.
//!
//! [`Sandbox`] layers run-scoped policy on top: image tags namespaced by
//! run id, the bounded build-with-repair loop, session lifecycle guards,
//! and the end-of-run sweep.

mod docker;
mod process;

pub use docker::DockerRuntime;
pub use process::ProcessRuntime;

use crate::text::tail_lines;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

/// Sentinel exit code for a command killed by the exec timeout. Chosen
/// outside the 0..=255 range a process can return, so it can never collide
/// with a real exit status.
pub const TIMEOUT_EXIT_CODE: i32 = -1;

/// Per-stream capture cap for exec output.
pub const STREAM_CAP_BYTES: usize = 64 * 1024;

/// Lines of build stderr fed back to the repair agent.
pub const STDERR_EXCERPT_LINES: usize = 200;

/// Default bound on build attempts in the repair loop.
pub const MAX_BUILD_ATTEMPTS: u32 = 5;

/// CPU limit applied to sessions, in whole cores.
pub const SESSION_CPUS: u32 = 2;

/// Memory limit applied to sessions, in bytes (4 GiB).
pub const SESSION_MEMORY_BYTES: u64 = 4 * 1024 * 1024 * 1024;

/// Output of one command execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub stdout: String,
    pub stderr: String,
    /// Process exit status, 128+signal for signal deaths, or
    /// [`TIMEOUT_EXIT_CODE`] when the timeout killed the command.
    pub exit_code: i32,
    pub duration_secs: f64,
    /// True when a stream hit its byte cap or the timeout fired.
    pub truncated: bool,
}

impl ExecResult {
    pub fn timed_out(&self) -> bool {
        self.exit_code == TIMEOUT_EXIT_CODE
    }
}

/// A live execution context inside a built image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub image_ref: String,
    /// Run label the session is tagged with, for end-of-run sweeps.
    pub run_label: String,
    /// False once torn down; exec on a dead session is an error.
    pub alive: bool,
}

/// A file injected into a session's /workspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileToCopy {
    /// Path relative to the session working directory.
    pub path: String,
    pub content: Vec<u8>,
    pub executable: bool,
}

/// One build invocation inside the repair loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildAttempt {
    /// 1-based attempt number.
    pub index: u32,
    pub success: bool,
    /// Tail of the build log on failure; empty on success.
    pub stderr_excerpt: String,
    pub duration_secs: f64,
}

/// Terminal status of a build-with-repair loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStatus {
    Valid,
    Invalid,
}

/// Full record of a build-with-repair loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub attempts: Vec<BuildAttempt>,
    pub status: BuildStatus,
    /// Image reference usable for sessions; present iff status is Valid.
    pub image_ref: Option<String>,
}

/// Runtime-level result of a single image build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildOutcome {
    Success { image_ref: String },
    Failure { stderr: String },
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("session {session_id} is no longer alive")]
    DeadSession { session_id: String },
    #[error("exec command is empty")]
    EmptyCommand,
    #[error("image {image_ref} is not available in this runtime")]
    UnknownImage { image_ref: String },
    #[error("repair callback failed: {0}")]
    Repair(String),
    #[error("{runtime} runtime error: {detail}")]
    Runtime { runtime: &'static str, detail: String },
    #[error("sandbox io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Image build and session execution backend. Implementations must be
/// thread-safe; stage workers share one runtime.
pub trait ContainerRuntime: Send + Sync {
    /// Short backend name used in errors and logs.
    fn name(&self) -> &'static str;

    /// Builds the image for a bundle directory. Build failures are data
    /// (the repair loop consumes them), not errors; `Err` is reserved for
    /// infrastructure faults like an unreachable daemon.
    fn build(&self, context_dir: &Path, image_tag: &str) -> Result<BuildOutcome, SandboxError>;

    /// Creates and starts a session labeled for `run_label`.
    fn create_session(&self, image_ref: &str, run_label: &str) -> Result<Session, SandboxError>;

    /// Runs one command in the session's /workspace with a wall-clock
    /// timeout. Streams are capped at [`STREAM_CAP_BYTES`] each.
    fn exec(
        &self,
        session: &Session,
        command: &str,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError>;

    /// Writes files into the session's /workspace.
    fn copy_in(&self, session: &Session, files: &[FileToCopy]) -> Result<(), SandboxError>;

    /// Destroys a session. Removing an already-removed session is not an
    /// error.
    fn remove_session(&self, session: &Session) -> Result<(), SandboxError>;

    /// Lists live sessions carrying `run_label`.
    fn list_sessions(&self, run_label: &str) -> Result<Vec<Session>, SandboxError>;
}

/// Run-scoped sandbox facade over a runtime.
pub struct Sandbox {
    runtime: Arc<dyn ContainerRuntime>,
    run_id: String,
    exec_timeout: Duration,
}

impl Sandbox {
    pub fn new(runtime: Arc<dyn ContainerRuntime>, run_id: impl Into<String>, exec_timeout: Duration) -> Self {
        Sandbox { runtime, run_id: run_id.into(), exec_timeout }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn runtime(&self) -> &dyn ContainerRuntime {
        self.runtime.as_ref()
    }

    /// Image tag for a task, namespaced by run id.
    pub fn image_tag(&self, task_id: &str) -> String {
        format!("{}/{}:latest", self.run_id, task_id)
    }

    /// Builds a bundle's image, invoking `repair` with the stderr excerpt
    /// after every failed attempt except the last and writing the revised
    /// Dockerfile back into the bundle before retrying.
    ///
    /// With `max_attempts` = N, the loop performs at most N builds and
    /// N - 1 repair calls. The caller guarantees the initial Dockerfile
    /// already passes static lint.
    pub fn build_with_repair(
        &self,
        context_dir: &Path,
        task_id: &str,
        max_attempts: u32,
        repair: &mut dyn FnMut(&str) -> Result<String, String>,
    ) -> Result<BuildReport, SandboxError> {
        assert!(max_attempts >= 1, "build loop needs at least one attempt");
        let image_tag = self.image_tag(task_id);
        let mut attempts = Vec::new();
        for index in 1..=max_attempts {
            let started = std::time::Instant::now();
            let outcome = self.runtime.build(context_dir, &image_tag)?;
            let duration_secs = started.elapsed().as_secs_f64();
            match outcome {
                BuildOutcome::Success { image_ref } => {
                    attempts.push(BuildAttempt {
                        index,
                        success: true,
                        stderr_excerpt: String::new(),
                        duration_secs,
                    });
                    tracing::info!(task_id, attempt = index, "image built");
                    return Ok(BuildReport {
                        attempts,
                        status: BuildStatus::Valid,
                        image_ref: Some(image_ref),
                    });
                }
                BuildOutcome::Failure { stderr } => {
                    let excerpt = tail_lines(&stderr, STDERR_EXCERPT_LINES);
                    tracing::warn!(task_id, attempt = index, "build failed");
                    attempts.push(BuildAttempt {
                        index,
                        success: false,
                        stderr_excerpt: excerpt.clone(),
                        duration_secs,
                    });
                    if index < max_attempts {
                        let revised = repair(&excerpt).map_err(SandboxError::Repair)?;
                        let dockerfile = context_dir.join("Dockerfile");
                        std::fs::write(&dockerfile, revised)
                            .map_err(|source| SandboxError::Io { path: dockerfile, source })?;
                    }
                }
            }
        }
        Ok(BuildReport { attempts, status: BuildStatus::Invalid, image_ref: None })
    }

    pub fn open_session(&self, image_ref: &str) -> Result<Session, SandboxError> {
        self.runtime.create_session(image_ref, &self.run_id)
    }

    /// Runs a command in a live session. Empty commands and dead sessions
    /// are rejected before reaching the runtime.
    pub fn exec(&self, session: &Session, command: &str) -> Result<ExecResult, SandboxError> {
        self.exec_with_timeout(session, command, self.exec_timeout)
    }

    pub fn exec_with_timeout(
        &self,
        session: &Session,
        command: &str,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError> {
        if !session.alive {
            return Err(SandboxError::DeadSession { session_id: session.session_id.clone() });
        }
        if command.trim().is_empty() {
            return Err(SandboxError::EmptyCommand);
        }
        self.runtime.exec(session, command, timeout)
    }

    pub fn copy_in(&self, session: &Session, files: &[FileToCopy]) -> Result<(), SandboxError> {
        if !session.alive {
            return Err(SandboxError::DeadSession { session_id: session.session_id.clone() });
        }
        self.runtime.copy_in(session, files)
    }

    /// Tears a session down. Calling it again on the same session is a
    /// no-op.
    pub fn teardown(&self, session: &mut Session) -> Result<(), SandboxError> {
        if !session.alive {
            return Ok(());
        }
        self.runtime.remove_session(session)?;
        session.alive = false;
        Ok(())
    }

    /// Removes every session labeled with this run id, returning how many
    /// were swept.
    pub fn sweep(&self) -> Result<usize, SandboxError> {
        let sessions = self.runtime.list_sessions(&self.run_id)?;
        let count = sessions.len();
        for session in sessions {
            self.runtime.remove_session(&session)?;
        }
        if count > 0 {
            tracing::info!(run_id = %self.run_id, count, "swept leftover sessions");
        }
        Ok(count)
    }
}
