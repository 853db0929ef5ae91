//! Declarative run configuration.
//!
//! One TOML document holds every knob a run needs; the copy persisted in
//! the run directory, together with the cassettes, reproduces the run
//! exactly. Command-line flags override individual fields before the
//! effective config is written back.

use serde::{Deserialize, Serialize};
use shellforge_core::collector::ObservationSource;
use shellforge_core::gateway::GatewayMode;
use shellforge_core::sandbox::MAX_BUILD_ATTEMPTS;
use std::path::Path;

/// Connection settings for the completion provider. Only the name of the
/// environment variable holding the API key is configured; the key itself
/// never lands in a config file or run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSettings {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        ProviderSettings {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "SHELLFORGE_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

/// Which execution backend runs task containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeKind {
    /// Docker daemon over its Unix socket.
    Docker,
    /// Local process sessions; no daemon required.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Names the run directory and namespaces image tags and session
    /// labels. Filesystem-safe by construction.
    pub run_id: String,
    pub gateway_mode: GatewayMode,
    pub provider: ProviderSettings,
    pub runtime: RuntimeKind,
    /// Docker socket path; None uses the default.
    pub docker_socket: Option<String>,
    pub seeds_per_category: u32,
    /// Error-injection probability per collection step.
    pub epsilon: f64,
    pub rng_seed: u64,
    pub max_turns: u32,
    pub critic_regen_cap: u32,
    pub build_max_attempts: u32,
    /// Completion-rate threshold for the export stage.
    pub tau: f64,
    pub workers: u32,
    pub exec_timeout_secs: u64,
    pub observation_source: ObservationSource,
    pub base_image: String,
    /// Independent solver runs per task in the solve stage.
    pub solve_runs: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "dev".into(),
            gateway_mode: GatewayMode::Replay,
            provider: ProviderSettings::default(),
            runtime: RuntimeKind::Process,
            docker_socket: None,
            seeds_per_category: 4,
            epsilon: 0.2,
            rng_seed: 0,
            max_turns: 50,
            critic_regen_cap: 3,
            build_max_attempts: MAX_BUILD_ATTEMPTS,
            tau: 0.5,
            workers: 4,
            exec_timeout_secs: 120,
            observation_source: ObservationSource::Real,
            base_image: "ubuntu:24.04".into(),
            solve_runs: 3,
        }
    }
}

fn run_id_is_safe(run_id: &str) -> bool {
    !run_id.is_empty()
        && run_id.len() <= 64
        && run_id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !run_id_is_safe(&self.run_id) {
            return Err(format!(
                "run_id {:?} must be 1-64 chars of [a-z0-9_-]",
                self.run_id
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} is outside [0, 1]", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau {} is outside [0, 1]", self.tau));
        }
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".into());
        }
        if self.build_max_attempts == 0 || self.build_max_attempts > MAX_BUILD_ATTEMPTS {
            return Err(format!(
                "build_max_attempts {} is outside 1..={MAX_BUILD_ATTEMPTS}",
                self.build_max_attempts
            ));
        }
        if self.seeds_per_category == 0 {
            return Err("seeds_per_category must be at least 1".into());
        }
        if self.workers == 0 || self.workers > 64 {
            return Err(format!("workers {} is outside 1..=64", self.workers));
        }
        if self.exec_timeout_secs == 0 {
            return Err("exec_timeout_secs must be at least 1".into());
        }
        if self.solve_runs == 0 {
            return Err("solve_runs must be at least 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| format!("cannot read config {}: {err}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|err| format!("cannot parse config {}: {err}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let text = toml::to_string_pretty(self)
            .map_err(|err| format!("cannot serialize config: {err}"))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|err| format!("cannot create {}: {err}", parent.display()))?;
        }
        std::fs::write(path, text)
            .map_err(|err| format!("cannot write config {}: {err}", path.display()))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(value) = &overrides.$field {
                    self.$field = value.clone();
                }
            };
        }
        set!(run_id);
        set!(gateway_mode);
        set!(runtime);
        set!(epsilon);
        set!(rng_seed);
        set!(max_turns);
        set!(tau);
        set!(workers);
        set!(observation_source);
        set!(seeds_per_category);
        set!(solve_runs);
    }
}

/// Field overrides collected from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub gateway_mode: Option<GatewayMode>,
    pub runtime: Option<RuntimeKind>,
    pub epsilon: Option<f64>,
    pub rng_seed: Option<u64>,
    pub max_turns: Option<u32>,
    pub tau: Option<f64>,
    pub workers: Option<u32>,
    pub observation_source: Option<ObservationSource>,
    pub seeds_per_category: Option<u32>,
    pub solve_runs: Option<u32>,
}

pub fn parse_gateway_mode(text: &str) -> Result<GatewayMode, String> {
    match text {
        "live" => Ok(GatewayMode::Live),
        "record" => Ok(GatewayMode::Record),
        "replay" => Ok(GatewayMode::Replay),
        other => Err(format!("unknown gateway mode {other:?} (live|record|replay)")),
    }
}

pub fn parse_observation_source(text: &str) -> Result<ObservationSource, String> {
    match text {
        "real" => Ok(ObservationSource::Real),
        "simulated" => Ok(ObservationSource::Simulated),
        other => Err(format!("unknown observation source {other:?} (real|simulated)")),
    }
}

pub fn parse_runtime(text: &str) -> Result<RuntimeKind, String> {
    match text {
        "docker" => Ok(RuntimeKind::Docker),
        "process" => Ok(RuntimeKind::Process),
        other => Err(format!("unknown runtime {other:?} (docker|process)")),
    }
}
