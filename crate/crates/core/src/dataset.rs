//! Trajectory persistence, threshold filtering, corpus statistics,
//! chat-format export, and the simulated-observation audit.
//!
//! The store is JSON Lines: one trajectory per line, append-only. Each
//! append is a single O_APPEND write of one complete line, so concurrent
//! collectors interleave whole records and a crash can at worst leave one
//! torn final line, which readers skip with a warning.

use crate::agent::render_observation;
use crate::collector::{render_step_message, ObservationSource, Trajectory};
use crate::gateway::{AgentRole, Gateway, Message};
use crate::prompts::{parse_json_reply, LlmCall, PromptError};
use crate::shell::extract_tools;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Histogram bucket for tools the inventory does not know.
pub const UNCATEGORIZED: &str = "uncategorized";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset store {path} line {line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Append-only JSON Lines store of trajectories.
pub struct TrajectoryStore {
    path: PathBuf,
}

impl TrajectoryStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        TrajectoryStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one trajectory as one line. The line is serialized fully
    /// before the file is touched and written with a single O_APPEND
    /// write, so records from concurrent collectors never interleave.
    pub fn append(&self, trajectory: &Trajectory) -> Result<(), DatasetError> {
        trajectory.validate().map_err(DatasetError::Invalid)?;
        let mut line = serde_json::to_string(trajectory)
            .map_err(|err| DatasetError::Invalid(err.to_string()))?;
        line.push('\n');
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(&self.path))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        Ok(())
    }

    /// Reads every record in append order. A missing file is an empty
    /// store. A final line that does not parse is treated as the torn
    /// tail of an interrupted append and skipped with a warning; a
    /// malformed interior line is corruption and an error.
    pub fn read_all(&self) -> Result<Vec<Trajectory>, DatasetError> {
        let file = match File::open(&self.path) {
            Ok(file) => file,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(err) => return Err(io_err(&self.path)(err)),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io_err(&self.path))?;
        let mut records = Vec::with_capacity(lines.len());
        let last = lines.len().saturating_sub(1);
        for (index, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Trajectory>(line) {
                Ok(trajectory) => records.push(trajectory),
                Err(err) if index == last => {
                    tracing::warn!(
                        path = %self.path.display(),
                        line = index + 1,
                        "skipping torn final line: {err}"
                    );
                }
                Err(err) => {
                    return Err(DatasetError::Corrupt {
                        path: self.path.clone(),
                        line: index + 1,
                        detail: err.to_string(),
                    });
                }
            }
        }
        Ok(records)
    }

    /// All records for one task, in append order.
    pub fn by_task(&self, task_id: &str) -> Result<Vec<Trajectory>, DatasetError> {
        Ok(self.read_all()?.into_iter().filter(|t| t.task_id == task_id).collect())
    }
}

/// Keeps trajectories whose test completion rate meets the threshold,
/// preserving order. tau=0 keeps everything, including outright failures.
pub fn filter_by_tau(trajectories: &[Trajectory], tau: f64) -> Vec<Trajectory> {
    assert!((0.0..=1.0).contains(&tau), "tau must be in [0, 1]");
    trajectories.iter().filter(|t| t.completion_rate >= tau).cloned().collect()
}

/// Maps tool names to functional categories for corpus statistics.
///
/// The shipped default covers sixteen categories of common terminal
/// tools; runs can persist it to a config file, edit it, and load it
/// back. Tools the inventory does not list are counted under
/// [`UNCATEGORIZED`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolInventory {
    categories: BTreeMap<String, BTreeSet<String>>,
}

impl ToolInventory {
    pub fn new(categories: BTreeMap<String, BTreeSet<String>>) -> Result<Self, String> {
        let inventory = ToolInventory { categories };
        inventory.validate()?;
        Ok(inventory)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.categories.is_empty() {
            return Err("inventory has no categories".into());
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (category, tools) in &self.categories {
            if tools.is_empty() {
                return Err(format!("category {category} lists no tools"));
            }
            for tool in tools {
                if let Some(other) = seen.insert(tool, category) {
                    return Err(format!(
                        "tool {tool} appears in both {other} and {category}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn category_of(&self, tool: &str) -> Option<&str> {
        self.categories
            .iter()
            .find(|(_, tools)| tools.contains(tool))
            .map(|(category, _)| category.as_str())
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self).expect("inventory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let inventory: ToolInventory =
            serde_json::from_str(text).map_err(|err| err.to_string())?;
        inventory.validate()?;
        Ok(inventory)
    }
}

impl Default for ToolInventory {
    fn default() -> Self {
        let seed: &[(&str, &[&str])] = &[
            (
                "file_operations",
                &[
                    "ls", "cp", "mv", "rm", "mkdir", "rmdir", "touch", "cat", "ln", "chmod",
                    "chown", "find", "stat", "dd", "basename", "dirname", "readlink", "install",
                    "mktemp", "tree",
                ],
            ),
            (
                "text_processing",
                &[
                    "grep", "egrep", "sed", "awk", "cut", "sort", "uniq", "tr", "head", "tail",
                    "wc", "diff", "comm", "paste", "join", "fmt", "column", "tee", "xargs",
                    "split", "rev", "printf", "echo",
                ],
            ),
            (
                "package_management",
                &[
                    "apt", "apt-get", "dpkg", "pip", "pip3", "npm", "npx", "yarn", "cargo",
                    "gem", "conda", "apk", "yum", "dnf", "snap",
                ],
            ),
            ("version_control", &["git", "hg", "svn", "git-lfs"]),
            (
                "build_tools",
                &[
                    "make", "cmake", "gcc", "g++", "cc", "clang", "clang++", "ld", "ar",
                    "javac", "mvn", "gradle", "rustc", "go", "tsc", "ninja", "autoconf",
                    "automake", "libtool", "pkg-config",
                ],
            ),
            (
                "networking",
                &[
                    "curl", "wget", "ssh", "scp", "rsync", "nc", "ping", "dig", "nslookup",
                    "ip", "ifconfig", "netstat", "ss", "telnet", "ftp",
                ],
            ),
            (
                "process_management",
                &[
                    "ps", "top", "htop", "kill", "killall", "pkill", "pgrep", "nice",
                    "renice", "nohup", "jobs", "bg", "fg", "timeout", "wait", "sleep",
                ],
            ),
            (
                "archive_compression",
                &["tar", "gzip", "gunzip", "zip", "unzip", "bzip2", "xz", "zcat", "7z", "zstd"],
            ),
            (
                "containers_virtualization",
                &["docker", "docker-compose", "podman", "kubectl", "vagrant", "buildah"],
            ),
            (
                "system_administration",
                &[
                    "sudo", "su", "useradd", "usermod", "groupadd", "systemctl", "service",
                    "mount", "umount", "df", "du", "free", "uname", "hostname", "crontab",
                    "journalctl", "sysctl", "env", "export", "id", "whoami", "date",
                ],
            ),
            (
                "scripting_runtimes",
                &[
                    "bash", "sh", "zsh", "dash", "python", "python3", "node", "ruby", "perl",
                    "php", "lua", "Rscript", "julia",
                ],
            ),
            (
                "data_tools",
                &["jq", "yq", "sqlite3", "mysql", "psql", "redis-cli", "csvtool", "xmllint"],
            ),
            (
                "security_forensics",
                &[
                    "openssl", "gpg", "sha256sum", "sha1sum", "md5sum", "base64", "hexdump",
                    "xxd", "strings", "file", "chroot",
                ],
            ),
            ("editors_pagers", &["vim", "vi", "nano", "emacs", "less", "more", "ed"]),
            ("scheduling_hpc", &["at", "batch", "sbatch", "squeue", "srun", "scancel"]),
            (
                "monitoring_debugging",
                &[
                    "strace", "ltrace", "gdb", "lsof", "time", "watch", "dmesg", "vmstat",
                    "iostat", "perf", "valgrind", "uptime",
                ],
            ),
        ];
        let categories = seed
            .iter()
            .map(|(category, tools)| {
                (category.to_string(), tools.iter().map(|t| t.to_string()).collect())
            })
            .collect();
        ToolInventory { categories }
    }
}

/// Corpus-level aggregates over a set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub trajectory_count: usize,
    pub avg_turns: f64,
    pub avg_approx_tokens: f64,
    /// Tool occurrences per functional category; one occurrence is one
    /// distinct tool in one command.
    pub tool_histogram: BTreeMap<String, u64>,
    pub unique_tool_count: usize,
    /// Commands the extractor could not fully parse.
    pub parse_warnings: u64,
}

/// Computes corpus statistics: averages over the trajectories and a
/// tool histogram from every step command, mapped through the inventory.
pub fn compute_stats(
    trajectories: &[Trajectory],
    inventory: &ToolInventory,
) -> Result<DatasetStats, DatasetError> {
    if trajectories.is_empty() {
        return Err(DatasetError::Invalid("cannot compute stats over an empty store".into()));
    }
    let count = trajectories.len();
    let turn_sum: u64 = trajectories.iter().map(|t| u64::from(t.turn_count)).sum();
    let token_sum: u64 = trajectories.iter().map(|t| t.approx_token_count).sum();
    let mut histogram: BTreeMap<String, u64> = BTreeMap::new();
    let mut unique: BTreeSet<String> = BTreeSet::new();
    let mut parse_warnings = 0u64;
    for trajectory in trajectories {
        for step in &trajectory.steps {
            let extraction = extract_tools(&step.command);
            if extraction.parse_warning {
                parse_warnings += 1;
            }
            for tool in extraction.tools {
                let category =
                    inventory.category_of(&tool).unwrap_or(UNCATEGORIZED).to_string();
                *histogram.entry(category).or_insert(0) += 1;
                unique.insert(tool);
            }
        }
    }
    Ok(DatasetStats {
        trajectory_count: count,
        avg_turns: turn_sum as f64 / count as f64,
        avg_approx_tokens: token_sum as f64 / count as f64,
        tool_histogram: histogram,
        unique_tool_count: unique.len(),
        parse_warnings,
    })
}

/// Message role in an exported chat record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftRole {
    System,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: SftRole,
    pub content: String,
}

/// One exported training record: a system message holding the task
/// description, then strictly alternating assistant and tool messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<SftMessage>,
}

impl SftRecord {
    /// Checks the export structure: system first, then assistant/tool
    /// pairs in strict alternation with equal counts.
    pub fn validate(&self) -> Result<(), String> {
        if self.messages.first().map(|m| m.role) != Some(SftRole::System) {
            return Err("record must start with a system message".into());
        }
        let rest = &self.messages[1..];
        if rest.is_empty() {
            return Err("record has no assistant turns".into());
        }
        if !rest.len().is_multiple_of(2) {
            return Err("assistant and tool counts differ".into());
        }
        for (offset, message) in rest.iter().enumerate() {
            let expected = if offset % 2 == 0 { SftRole::Assistant } else { SftRole::Tool };
            if message.role != expected {
                return Err(format!("message {} breaks alternation", offset + 1));
            }
        }
        Ok(())
    }
}

/// Builds the chat record for one trajectory, given the task description
/// for its system message.
pub fn to_sft_record(trajectory: &Trajectory, description: &str) -> Result<SftRecord, String> {
    trajectory.validate()?;
    if trajectory.steps.is_empty() {
        return Err("trajectory has no steps".into());
    }
    let mut messages = Vec::with_capacity(1 + trajectory.steps.len() * 2);
    messages.push(SftMessage { role: SftRole::System, content: description.to_string() });
    for step in &trajectory.steps {
        messages.push(SftMessage {
            role: SftRole::Assistant,
            content: render_step_message(&step.reasoning, &step.command),
        });
        messages.push(SftMessage {
            role: SftRole::Tool,
            content: render_observation(&step.observation),
        });
    }
    let record = SftRecord { messages };
    debug_assert_eq!(record.validate(), Ok(()));
    Ok(record)
}

/// Result of one export pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub exported: usize,
    /// (task_id, reason) for every trajectory left out.
    pub skipped: Vec<(String, String)>,
}

/// Exports the trajectories passing the τ threshold as JSON Lines of
/// chat records, one per trajectory. `descriptions` maps task_id to the
/// task description used as the system message. A trajectory that cannot
/// form a well-formed record is skipped whole, with the reason logged
/// and reported; partial records are never written.
pub fn export_sft(
    trajectories: &[Trajectory],
    tau: f64,
    descriptions: &BTreeMap<String, String>,
    out_path: &Path,
) -> Result<ExportReport, DatasetError> {
    let kept = filter_by_tau(trajectories, tau);
    let mut lines = String::new();
    let mut exported = 0usize;
    let mut skipped = Vec::new();
    for trajectory in &kept {
        let record = descriptions
            .get(&trajectory.task_id)
            .ok_or_else(|| "no task description on record".to_string())
            .and_then(|description| to_sft_record(trajectory, description));
        match record {
            Ok(record) => {
                let line = serde_json::to_string(&record)
                    .map_err(|err| DatasetError::Invalid(err.to_string()))?;
                lines.push_str(&line);
                lines.push('\n');
                exported += 1;
            }
            Err(reason) => {
                tracing::warn!(task_id = %trajectory.task_id, reason, "skipping trajectory in export");
                skipped.push((trajectory.task_id.clone(), reason));
            }
        }
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(out_path))?;
    }
    std::fs::write(out_path, lines).map_err(io_err(out_path))?;
    Ok(ExportReport { exported, skipped })
}

/// Reads an exported JSON Lines file back into records.
pub fn read_sft_export(path: &Path) -> Result<Vec<SftRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SftRecord =
            serde_json::from_str(line).map_err(|err| DatasetError::Corrupt {
                path: path.to_path_buf(),
                line: index + 1,
                detail: err.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Defect classes for fabricated observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    /// Invented output where the real command would have been silent.
    SpuriousVerbosity,
    /// Output whose content contradicts what the command does.
    SemanticDeviation,
    /// Output that contradicts state established earlier in the session.
    StateInconsistency,
}

impl DefectClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefectClass::SpuriousVerbosity => "spurious_verbosity",
            DefectClass::SemanticDeviation => "semantic_deviation",
            DefectClass::StateInconsistency => "state_inconsistency",
        }
    }
}

/// One audited defect in a simulated observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub trajectory_id: String,
    pub step_index: u32,
    pub defect_class: DefectClass,
    pub rationale: String,
}

/// Outcome of auditing a batch of simulated trajectories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    /// Findings per defect class; sums to the finding count.
    pub class_histogram: BTreeMap<DefectClass, u64>,
    pub audited_steps: usize,
    /// Steps whose judge reply stayed unusable through the re-prompt
    /// budget and were skipped.
    pub skipped_steps: usize,
}

impl AuditReport {
    pub fn flagged_fraction(&self) -> f64 {
        if self.audited_steps == 0 {
            0.0
        } else {
            self.findings.len() as f64 / self.audited_steps as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub reprompt_budget: u32,
}

impl Default for AuditParams {
    fn default() -> Self {
        AuditParams { temperature: 0.2, max_output_tokens: 1024, reprompt_budget: 2 }
    }
}

#[derive(Debug, Deserialize)]
struct AuditReply {
    defect: String,
    #[serde(default)]
    rationale: String,
}

fn audit_system_prompt() -> String {
    "You audit one observation from a terminal session that was produced by a \
     simulator instead of a real shell. Decide whether the observation is \
     faithful to what the command would really print, given the session so \
     far. Classify a defect as exactly one of:\n\
     - spurious_verbosity: invented output where the real command is silent \
       (for example a confirmation message after a plain redirection)\n\
     - semantic_deviation: output whose content is wrong for the command\n\
     - state_inconsistency: output contradicting state established earlier \
       in the session (for example reading back a file that was written and \
       getting an error)\n\
     Reply with JSON only: {\"defect\": \"none\" | \"spurious_verbosity\" | \
     \"semantic_deviation\" | \"state_inconsistency\", \"rationale\": \"...\"}"
        .into()
}

/// Audits every step of the given simulated trajectories, one judge call
/// per step. `trajectory_id` is the task id qualified with the position
/// in the input slice so repeated tasks stay distinguishable. Steps whose
/// judge output never parses are skipped with a warning; transport errors
/// abort the audit.
pub fn audit_observations(
    gateway: &Gateway,
    trajectories: &[Trajectory],
    params: &AuditParams,
) -> Result<AuditReport, DatasetError> {
    for trajectory in trajectories {
        if trajectory.observation_source != ObservationSource::Simulated {
            return Err(DatasetError::Invalid(format!(
                "trajectory for task {} has real observations; the audit covers simulated ones",
                trajectory.task_id
            )));
        }
    }
    let mut findings = Vec::new();
    let mut audited_steps = 0usize;
    let mut skipped_steps = 0usize;
    for (ordinal, trajectory) in trajectories.iter().enumerate() {
        let trajectory_id = format!("{}#{}", trajectory.task_id, ordinal);
        let call = LlmCall {
            gateway,
            scope: &trajectory.task_id,
            role: AgentRole::Auditor,
            temperature: params.temperature,
            max_output_tokens: params.max_output_tokens,
            reprompt_budget: params.reprompt_budget,
        };
        let mut transcript = String::new();
        for step in &trajectory.steps {
            let user = format!(
                "Session so far:\n{}\nCommand under audit:\n$ {}\nObservation under audit:\n{}",
                if transcript.is_empty() { "(fresh session)" } else { &transcript },
                step.command,
                render_observation(&step.observation),
            );
            let judged = call.structured(
                vec![Message::system(audit_system_prompt()), Message::user(user)],
                |reply| {
                    let parsed =
                        parse_json_reply::<AuditReply>(reply).map_err(|e| e.to_string())?;
                    let defect = match parsed.defect.as_str() {
                        "none" => None,
                        "spurious_verbosity" => Some(DefectClass::SpuriousVerbosity),
                        "semantic_deviation" => Some(DefectClass::SemanticDeviation),
                        "state_inconsistency" => Some(DefectClass::StateInconsistency),
                        other => return Err(format!("unknown defect class {other:?}")),
                    };
                    Ok((defect, parsed.rationale))
                },
            );
            match judged {
                Ok((Some(defect_class), rationale)) => {
                    audited_steps += 1;
                    findings.push(AuditFinding {
                        trajectory_id: trajectory_id.clone(),
                        step_index: step.index,
                        defect_class,
                        rationale,
                    });
                }
                Ok((None, _)) => audited_steps += 1,
                Err(PromptError::Unusable { .. }) => {
                    tracing::warn!(
                        trajectory_id,
                        step = step.index,
                        "judge reply unusable; skipping step in audit"
                    );
                    skipped_steps += 1;
                }
                Err(err) => return Err(err.into()),
            }
            transcript.push_str(&format!(
                "$ {}\n{}\n",
                step.command,
                render_observation(&step.observation)
            ));
        }
    }
    let mut class_histogram = BTreeMap::new();
    for finding in &findings {
        *class_histogram.entry(finding.defect_class).or_insert(0u64) += 1;
    }
    Ok(AuditReport { findings, class_histogram, audited_steps, skipped_steps })
}
