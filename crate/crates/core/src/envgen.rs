//! Environment bundle generation for accepted tasks.
//!
//! A task spec is expanded into an on-disk bundle:
//!
//! ```text
//! <task_id>/
//!   task.yaml            task description and metadata
//!   Dockerfile           environment image definition
//!   docker-compose.yaml  resource-limited service definition
//!   run-tests.sh         verification entry point (placeholder until
//!                        a suite is generated)
//!   tests/               verification suite directory
//!   <artifacts...>       planner-chosen data, config, source, scripts
//! ```
//!
//! The file planner proposes relative artifact paths, a construct agent
//! writes each file, and an environment agent writes the Dockerfile, which
//! is statically linted (base image present, every artifact copied) before
//! any build is attempted.

use crate::gateway::{AgentRole, Gateway, Message};
use crate::prompts::{parse_json_reply, single_fenced_block, LlmCall, PromptError};
use crate::taskgen::TaskSpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Largest artifact the construct agent may emit, in bytes.
pub const MAX_ARTIFACT_BYTES: usize = 256 * 1024;

/// Bundle file names owned by the pipeline; the planner may not claim them.
pub const RESERVED_PATHS: &[&str] =
    &["task.yaml", "Dockerfile", "docker-compose.yaml", "run-tests.sh"];

/// Directory reserved for the generated verification suite.
pub const TESTS_DIR: &str = "tests";

/// What an artifact is for; scripts are written with the executable bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Data,
    Config,
    Source,
    Script,
}

/// One planned file in a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlueprintEntry {
    /// Relative, normalized path inside the bundle.
    pub path: String,
    /// What the construct agent must put there.
    pub requirement: String,
    pub kind: ArtifactKind,
}

/// The planner's full file layout for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileBlueprint {
    pub entries: Vec<BlueprintEntry>,
}

/// One constructed file, validated against the blueprint constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvArtifact {
    pub path: String,
    pub content: String,
    pub executable: bool,
}

/// Checks that a planner path is relative, normalized, and inside the
/// bundle: no absolute paths, no `.`/`..` segments, no empty segments,
/// no backslashes, and no trailing slash.
pub fn validate_rel_path(path: &str) -> Result<(), String> {
    if path.is_empty() {
        return Err("path is empty".into());
    }
    if path.len() > 256 {
        return Err(format!("path {path:?} exceeds 256 characters"));
    }
    if path.contains('\\') || path.contains('\0') {
        return Err(format!("path {path:?} contains a forbidden character"));
    }
    if path.starts_with('/') {
        return Err(format!("path {path:?} is absolute"));
    }
    if path.ends_with('/') {
        return Err(format!("path {path:?} ends with a separator"));
    }
    for segment in path.split('/') {
        match segment {
            "" => return Err(format!("path {path:?} has an empty segment")),
            "." | ".." => return Err(format!("path {path:?} traverses outside the bundle")),
            _ => {}
        }
    }
    Ok(())
}

/// Validates a whole blueprint: every path safe and distinct, none
/// claiming a reserved file or the tests directory, every requirement
/// non-empty, and at least one entry overall.
pub fn validate_blueprint(blueprint: &FileBlueprint) -> Result<(), String> {
    if blueprint.entries.is_empty() {
        return Err("blueprint has no entries".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for entry in &blueprint.entries {
        validate_rel_path(&entry.path)?;
        if RESERVED_PATHS.contains(&entry.path.as_str()) {
            return Err(format!("path {:?} is reserved for the bundle layout", entry.path));
        }
        if entry.path == TESTS_DIR || entry.path.starts_with("tests/") {
            return Err(format!("path {:?} is reserved for the verification suite", entry.path));
        }
        if !seen.insert(entry.path.as_str()) {
            return Err(format!("duplicate blueprint path {:?}", entry.path));
        }
        if entry.requirement.trim().is_empty() {
            return Err(format!("entry {:?} has an empty requirement", entry.path));
        }
    }
    Ok(())
}

/// The `task.yaml` document. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskYaml {
    pub id: String,
    pub category: String,
    pub tier: String,
    pub description: String,
    pub input_requirements: String,
    pub output_requirements: String,
    pub success_criteria: String,
    pub max_agent_timeout_sec: u64,
}

impl TaskYaml {
    pub fn from_spec(spec: &TaskSpec, max_agent_timeout_sec: u64) -> Self {
        TaskYaml {
            id: spec.spec_id.clone(),
            category: spec.seed.category_name.clone(),
            tier: spec.seed.tier.clone(),
            description: spec.objective.clone(),
            input_requirements: spec.input_requirements.clone(),
            output_requirements: spec.output_requirements.clone(),
            success_criteria: spec.success_criteria.clone(),
            max_agent_timeout_sec,
        }
    }

    pub fn to_yaml_string(&self) -> Result<String, EnvGenError> {
        serde_yaml::to_string(self).map_err(EnvGenError::Yaml)
    }

    pub fn parse(text: &str) -> Result<Self, EnvGenError> {
        serde_yaml::from_str(text).map_err(EnvGenError::Yaml)
    }
}

#[derive(Debug, Error)]
pub enum EnvGenError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid blueprint: {0}")]
    InvalidBlueprint(String),
    #[error("task.yaml serialization: {0}")]
    Yaml(#[source] serde_yaml::Error),
    #[error("bundle io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Knobs for the generation calls.
#[derive(Debug, Clone)]
pub struct EnvGenParams {
    pub temperature: f64,
    pub reprompt_budget: u32,
    /// Pinned base image required in every Dockerfile.
    pub base_image: String,
    /// Value written to `task.yaml:max_agent_timeout_sec`.
    pub max_agent_timeout_sec: u64,
}

impl Default for EnvGenParams {
    fn default() -> Self {
        EnvGenParams {
            temperature: 0.7,
            reprompt_budget: 2,
            base_image: "ubuntu:24.04".to_string(),
            max_agent_timeout_sec: 600,
        }
    }
}

fn spec_summary(spec: &TaskSpec) -> String {
    format!(
        "Task id: {}\nCategory: {} {} (tier: {})\nObjective: {}\n\
         Input requirements: {}\nOutput requirements: {}\nSuccess criteria: {}",
        spec.spec_id,
        spec.seed.category_id,
        spec.seed.category_name,
        spec.seed.tier,
        spec.objective,
        spec.input_requirements,
        spec.output_requirements,
        spec.success_criteria,
    )
}

/// Asks the file planner for the bundle's artifact layout.
pub fn plan_files(
    gateway: &Gateway,
    spec: &TaskSpec,
    params: &EnvGenParams,
) -> Result<FileBlueprint, EnvGenError> {
    let call = LlmCall {
        gateway,
        scope: &spec.spec_id,
        role: AgentRole::FilePlanner,
        temperature: params.temperature,
        max_output_tokens: 1536,
        reprompt_budget: params.reprompt_budget,
    };
    let messages = vec![
        Message::system(
            "You plan the file layout for a terminal-task environment. Paths are \
             relative to /workspace inside the container. The names task.yaml, \
             Dockerfile, docker-compose.yaml, run-tests.sh and the tests/ directory \
             are owned by the pipeline; never plan them. Reply only with JSON \
             {\"entries\": [{\"path\": ..., \"requirement\": ..., \"kind\": \
             \"data\"|\"config\"|\"source\"|\"script\"}, ...]}.",
        ),
        Message::user(format!(
            "{}\n\nPlan every file the task environment needs before the agent starts.",
            spec_summary(spec)
        )),
    ];
    let blueprint = call.structured(messages, |text| {
        let blueprint: FileBlueprint = parse_json_reply(text)?;
        validate_blueprint(&blueprint)?;
        Ok(blueprint)
    })?;
    Ok(blueprint)
}

/// Asks the construct agent for one artifact's content. The reply must be
/// a single fenced block within the size cap.
pub fn construct_artifact(
    gateway: &Gateway,
    spec: &TaskSpec,
    blueprint: &FileBlueprint,
    entry: &BlueprintEntry,
    params: &EnvGenParams,
) -> Result<EnvArtifact, EnvGenError> {
    let call = LlmCall {
        gateway,
        scope: &spec.spec_id,
        role: AgentRole::Construct,
        temperature: params.temperature,
        max_output_tokens: 4096,
        reprompt_budget: params.reprompt_budget,
    };
    let layout: Vec<&str> = blueprint.entries.iter().map(|e| e.path.as_str()).collect();
    let messages = vec![
        Message::system(
            "You write the exact content of one environment file. Reply with a single \
             fenced code block containing the raw file content and nothing else outside it.",
        ),
        Message::user(format!(
            "{}\n\nFull planned layout: {}\n\nWrite the file {:?} ({:?}).\nRequirement: {}",
            spec_summary(spec),
            layout.join(", "),
            entry.path,
            entry.kind,
            entry.requirement,
        )),
    ];
    let content = call.structured(messages, |text| {
        let block = single_fenced_block(text)?;
        if block.content.len() > MAX_ARTIFACT_BYTES {
            return Err(format!(
                "content is {} bytes, above the {MAX_ARTIFACT_BYTES}-byte artifact cap",
                block.content.len()
            ));
        }
        if block.content.is_empty() {
            return Err("content is empty".into());
        }
        Ok(block.content)
    })?;
    Ok(EnvArtifact {
        path: entry.path.clone(),
        content,
        executable: entry.kind == ArtifactKind::Script,
    })
}

/// Static Dockerfile checks performed before any build attempt: a base
/// image instruction must come first, and every artifact must be covered
/// by a COPY/ADD source (exactly, by directory prefix, or by `.`).
pub fn lint_dockerfile(dockerfile: &str, artifact_paths: &[String]) -> Result<(), String> {
    let instructions: Vec<Vec<String>> = dockerfile
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let Some(first) = instructions.first() else {
        return Err("Dockerfile is empty".into());
    };
    if !first[0].eq_ignore_ascii_case("FROM") {
        return Err(format!("first instruction is {}, expected FROM", first[0]));
    }
    let mut copy_sources: Vec<String> = Vec::new();
    for instruction in &instructions {
        if instruction[0].eq_ignore_ascii_case("COPY") || instruction[0].eq_ignore_ascii_case("ADD") {
            let args: Vec<&String> =
                instruction[1..].iter().filter(|a| !a.starts_with("--")).collect();
            if args.len() >= 2 {
                for src in &args[..args.len() - 1] {
                    copy_sources.push(src.trim_start_matches("./").trim_end_matches('/').to_string());
                }
            }
        }
    }
    for path in artifact_paths {
        let covered = copy_sources.iter().any(|src| {
            src == "." || src == path || path.starts_with(&format!("{src}/"))
        });
        if !covered {
            return Err(format!("artifact {path:?} is not copied into the image"));
        }
    }
    Ok(())
}

/// Asks the environment agent for a Dockerfile pinned to the configured
/// base image; lint failures are re-prompted within the call budget.
pub fn generate_dockerfile(
    gateway: &Gateway,
    spec: &TaskSpec,
    blueprint: &FileBlueprint,
    params: &EnvGenParams,
) -> Result<String, EnvGenError> {
    let call = LlmCall {
        gateway,
        scope: &spec.spec_id,
        role: AgentRole::Env,
        temperature: params.temperature,
        max_output_tokens: 1536,
        reprompt_budget: params.reprompt_budget,
    };
    let paths: Vec<String> = blueprint.entries.iter().map(|e| e.path.clone()).collect();
    let messages = vec![
        Message::system(format!(
            "You write Dockerfiles for terminal-task environments. Requirements: the \
             first instruction is FROM {}; set WORKDIR /workspace; copy the bundle \
             files into /workspace (COPY . /workspace covers everything); install \
             whatever packages the task needs. Reply with a single fenced code block \
             containing only the Dockerfile.",
            params.base_image
        )),
        Message::user(format!(
            "{}\n\nBundle files: {}",
            spec_summary(spec),
            paths.join(", ")
        )),
    ];
    let base_image = params.base_image.clone();
    let dockerfile = call.structured(messages, move |text| {
        let block = single_fenced_block(text)?;
        lint_dockerfile(&block.content, &paths)?;
        if !block.content.contains(&base_image) {
            return Err(format!("Dockerfile does not use the pinned base image {base_image}"));
        }
        Ok(block.content)
    })?;
    Ok(dockerfile)
}

/// Asks the environment agent to revise a Dockerfile whose build failed,
/// given the build log tail. The revision must still pass lint and keep
/// the pinned base image; only the Dockerfile changes, never artifacts.
pub fn repair_dockerfile(
    gateway: &Gateway,
    task_id: &str,
    current_dockerfile: &str,
    stderr_excerpt: &str,
    artifact_paths: &[String],
    params: &EnvGenParams,
) -> Result<String, EnvGenError> {
    let call = LlmCall {
        gateway,
        scope: task_id,
        role: AgentRole::Env,
        temperature: params.temperature,
        max_output_tokens: 1536,
        reprompt_budget: params.reprompt_budget,
    };
    let messages = vec![
        Message::system(format!(
            "You repair Dockerfiles whose builds failed. Keep FROM {} as the first \
             instruction, keep WORKDIR /workspace, keep every bundle file copied in, \
             and change nothing outside the Dockerfile. Reply with a single fenced \
             code block containing only the revised Dockerfile.",
            params.base_image
        )),
        Message::user(format!(
            "Task: {task_id}\nBundle files: {}\n\nCurrent Dockerfile:\n{}\n\n\
             The build failed. Log tail:\n{}",
            artifact_paths.join(", "),
            current_dockerfile,
            stderr_excerpt,
        )),
    ];
    let paths = artifact_paths.to_vec();
    let base_image = params.base_image.clone();
    let revised = call.structured(messages, move |text| {
        let block = single_fenced_block(text)?;
        lint_dockerfile(&block.content, &paths)?;
        if !block.content.contains(&base_image) {
            return Err(format!("Dockerfile does not use the pinned base image {base_image}"));
        }
        Ok(block.content)
    })?;
    Ok(revised)
}

#[derive(Serialize)]
struct ComposeService {
    image: String,
    build: String,
    working_dir: String,
    command: String,
    cpus: u32,
    mem_limit: String,
}

#[derive(Serialize)]
struct ComposeFile {
    services: BTreeMap<String, ComposeService>,
}

/// Renders the deterministic docker-compose.yaml: one service named after
/// the task, pinned to 2 CPUs and 4 GiB of memory, idling so the agent
/// can exec into it.
pub fn compose_file(task_id: &str, image_ref: &str) -> String {
    let mut services = BTreeMap::new();
    services.insert(
        task_id.to_string(),
        ComposeService {
            image: image_ref.to_string(),
            build: ".".to_string(),
            working_dir: "/workspace".to_string(),
            command: "sleep infinity".to_string(),
            cpus: 2,
            mem_limit: "4g".to_string(),
        },
    );
    serde_yaml::to_string(&ComposeFile { services }).expect("compose file serializes")
}

/// Placeholder verification entry point written at bundle-creation time.
/// It keeps the layout complete and honest: zero tests, non-zero exit.
pub const PLACEHOLDER_RUNNER: &str = "#!/bin/sh\n\
# No verification suite has been generated for this task yet.\n\
echo \"PASSED=0 TOTAL=0\"\n\
exit 1\n";

/// An environment bundle rooted at one directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentBundle {
    pub task_id: String,
    pub root: PathBuf,
}

impl EnvironmentBundle {
    pub fn task_yaml_path(&self) -> PathBuf {
        self.root.join("task.yaml")
    }

    pub fn dockerfile_path(&self) -> PathBuf {
        self.root.join("Dockerfile")
    }

    pub fn compose_path(&self) -> PathBuf {
        self.root.join("docker-compose.yaml")
    }

    pub fn runner_path(&self) -> PathBuf {
        self.root.join("run-tests.sh")
    }

    pub fn tests_dir(&self) -> PathBuf {
        self.root.join(TESTS_DIR)
    }

    /// Reads back the bundle's task.yaml.
    pub fn read_task_yaml(&self) -> Result<TaskYaml, EnvGenError> {
        let path = self.task_yaml_path();
        let text = fs::read_to_string(&path)
            .map_err(|source| EnvGenError::Io { path: path.clone(), source })?;
        TaskYaml::parse(&text)
    }
}

fn write_file(path: &Path, content: &[u8], executable: bool) -> Result<(), EnvGenError> {
    let wrap = |source| EnvGenError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    fs::write(path, content).map_err(wrap)?;
    if executable {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o755)).map_err(wrap)?;
    }
    Ok(())
}

/// Writes a complete bundle under `root`: metadata, Dockerfile, compose
/// file, placeholder runner, empty tests directory, and every artifact.
/// Script artifacts and the runner get the executable bit.
pub fn write_bundle(
    root: &Path,
    spec: &TaskSpec,
    artifacts: &[EnvArtifact],
    dockerfile: &str,
    image_ref: &str,
    params: &EnvGenParams,
) -> Result<EnvironmentBundle, EnvGenError> {
    let bundle = EnvironmentBundle { task_id: spec.spec_id.clone(), root: root.to_path_buf() };
    let task_yaml = TaskYaml::from_spec(spec, params.max_agent_timeout_sec).to_yaml_string()?;
    write_file(&bundle.task_yaml_path(), task_yaml.as_bytes(), false)?;
    write_file(&bundle.dockerfile_path(), dockerfile.as_bytes(), false)?;
    write_file(
        &bundle.compose_path(),
        compose_file(&spec.spec_id, image_ref).as_bytes(),
        false,
    )?;
    write_file(&bundle.runner_path(), PLACEHOLDER_RUNNER.as_bytes(), true)?;
    let tests_dir = bundle.tests_dir();
    fs::create_dir_all(&tests_dir)
        .map_err(|source| EnvGenError::Io { path: tests_dir.clone(), source })?;
    for artifact in artifacts {
        if artifact.content.len() > MAX_ARTIFACT_BYTES {
            return Err(EnvGenError::InvalidBlueprint(format!(
                "artifact {:?} exceeds the {MAX_ARTIFACT_BYTES}-byte cap",
                artifact.path
            )));
        }
        validate_rel_path(&artifact.path).map_err(EnvGenError::InvalidBlueprint)?;
        write_file(&root.join(&artifact.path), artifact.content.as_bytes(), artifact.executable)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{FeasibilityScore, TaskSeed};
    use crate::testutil::{scripted_gateway, ScriptedProvider};

    fn spec() -> TaskSpec {
        TaskSpec {
            spec_id: "gcc_cannot_find_library".into(),
            seed: TaskSeed {
                slug: "gcc_cannot_find_library".into(),
                summary: "A C project fails to link.".into(),
                category_id: "1.1".into(),
                category_name: "Software Build & Compilation".into(),
                tier: "Infrastructure & Core Systems".into(),
            },
            objective: "Fix the build so the binary links".into(),
            input_requirements: "C sources and a Makefile in /workspace".into(),
            output_requirements: "A binary at /workspace/app".into(),
            success_criteria: "run-tests.sh exits 0".into(),
            refinement_rounds_used: 0,
            evaluation: FeasibilityScore {
                environment_complexity: 5,
                data_generatability: 5,
                verification_determinism: 5,
                feedback: "ok".into(),
            },
        }
    }

    #[test]
    fn path_validation_accepts_normal_relative_paths() {
        for path in ["main.c", "src/lib/util.py", "data/input.csv", "deep/a/b/c.txt"] {
            validate_rel_path(path).unwrap();
        }
    }

    #[test]
    fn path_validation_rejects_escapes_and_malformed_paths() {
        for path in [
            "", "/etc/passwd", "../up.txt", "a/../b", "./x", "a//b", "a/b/", "win\\path",
        ] {
            assert!(validate_rel_path(path).is_err(), "{path:?} should be rejected");
        }
    }

    #[test]
    fn blueprint_validation_rejects_reserved_and_duplicate_paths() {
        let entry = |path: &str| BlueprintEntry {
            path: path.into(),
            requirement: "content".into(),
            kind: ArtifactKind::Data,
        };
        for reserved in ["task.yaml", "Dockerfile", "docker-compose.yaml", "run-tests.sh", "tests/test_outputs.py"] {
            let blueprint = FileBlueprint { entries: vec![entry(reserved)] };
            assert!(validate_blueprint(&blueprint).is_err(), "{reserved:?} should be rejected");
        }
        let blueprint = FileBlueprint { entries: vec![entry("a.txt"), entry("a.txt")] };
        assert!(validate_blueprint(&blueprint).unwrap_err().contains("duplicate"));
        assert!(validate_blueprint(&FileBlueprint { entries: vec![] }).is_err());
        validate_blueprint(&FileBlueprint { entries: vec![entry("a.txt"), entry("b/c.txt")] })
            .unwrap();
    }

    #[test]
    fn planner_reply_is_validated_and_reprompted() {
        let provider = ScriptedProvider::new()
            .push(
                AgentRole::FilePlanner,
                r#"{"entries": [{"path": "../escape.txt", "requirement": "x", "kind": "data"}]}"#,
            )
            .push(
                AgentRole::FilePlanner,
                r#"{"entries": [{"path": "data/input.txt", "requirement": "three lines", "kind": "data"}]}"#,
            );
        let gateway = scripted_gateway(provider.clone());
        let blueprint = plan_files(&gateway, &spec(), &EnvGenParams::default()).unwrap();
        assert_eq!(blueprint.entries.len(), 1);
        assert_eq!(blueprint.entries[0].path, "data/input.txt");
        assert_eq!(provider.calls(AgentRole::FilePlanner), 2);
    }

    #[test]
    fn construct_produces_artifact_with_script_bit() {
        let provider = ScriptedProvider::new().push(
            AgentRole::Construct,
            "Here is the file.\n```sh\n#!/bin/sh\nexit 0\n```",
        );
        let gateway = scripted_gateway(provider);
        let entry = BlueprintEntry {
            path: "bin/check.sh".into(),
            requirement: "exit zero".into(),
            kind: ArtifactKind::Script,
        };
        let blueprint = FileBlueprint { entries: vec![entry.clone()] };
        let artifact =
            construct_artifact(&gateway, &spec(), &blueprint, &entry, &EnvGenParams::default())
                .unwrap();
        assert!(artifact.executable);
        assert_eq!(artifact.content, "#!/bin/sh\nexit 0");
    }

    #[test]
    fn oversized_artifact_is_rejected_after_budget() {
        let big = format!("```\n{}\n```", "x".repeat(MAX_ARTIFACT_BYTES + 1));
        let provider = ScriptedProvider::new();
        for _ in 0..3 {
            provider.push(AgentRole::Construct, big.clone());
        }
        let gateway = scripted_gateway(provider);
        let entry = BlueprintEntry {
            path: "data/huge.txt".into(),
            requirement: "big".into(),
            kind: ArtifactKind::Data,
        };
        let blueprint = FileBlueprint { entries: vec![entry.clone()] };
        let err = construct_artifact(
            &gateway,
            &spec(),
            &blueprint,
            &entry,
            &EnvGenParams { reprompt_budget: 2, ..EnvGenParams::default() },
        )
        .unwrap_err();
        assert!(err.to_string().contains("artifact cap"), "{err}");
    }

    #[test]
    fn dockerfile_lint_checks_base_and_copy_closure() {
        let paths = vec!["data/input.txt".to_string(), "src/main.c".to_string()];
        lint_dockerfile("FROM ubuntu:24.04\nWORKDIR /workspace\nCOPY . /workspace\n", &paths)
            .unwrap();
        lint_dockerfile(
            "# comment first\nFROM ubuntu:24.04\nCOPY data/ /workspace/data/\nCOPY src/main.c /workspace/src/main.c\n",
            &paths,
        )
        .unwrap();
        let err = lint_dockerfile("RUN apt-get update\nFROM ubuntu:24.04\nCOPY . /w\n", &paths)
            .unwrap_err();
        assert!(err.contains("expected FROM"));
        let err =
            lint_dockerfile("FROM ubuntu:24.04\nCOPY src/main.c /workspace/\n", &paths).unwrap_err();
        assert!(err.contains("data/input.txt"));
        assert!(lint_dockerfile("", &paths).is_err());
    }

    #[test]
    fn dockerfile_generation_lints_and_pins_base_image() {
        let provider = ScriptedProvider::new()
            .push(AgentRole::Env, "```dockerfile\nFROM debian:12\nCOPY . /workspace\n```")
            .push(
                AgentRole::Env,
                "```dockerfile\nFROM ubuntu:24.04\nWORKDIR /workspace\nCOPY . /workspace\n```",
            );
        let gateway = scripted_gateway(provider.clone());
        let blueprint = FileBlueprint {
            entries: vec![BlueprintEntry {
                path: "data/input.txt".into(),
                requirement: "x".into(),
                kind: ArtifactKind::Data,
            }],
        };
        let dockerfile =
            generate_dockerfile(&gateway, &spec(), &blueprint, &EnvGenParams::default()).unwrap();
        assert!(dockerfile.starts_with("FROM ubuntu:24.04"));
        assert_eq!(provider.calls(AgentRole::Env), 2);
    }

    #[test]
    fn dockerfile_repair_keeps_lint_and_base_image() {
        let provider = ScriptedProvider::new()
            .push(AgentRole::Env, "```dockerfile\nFROM alpine:3\nCOPY . /workspace\n```")
            .push(
                AgentRole::Env,
                "```dockerfile\nFROM ubuntu:24.04\nWORKDIR /workspace\nCOPY . /workspace\n\
                 RUN apt-get update && apt-get install -y make\n```",
            );
        let gateway = scripted_gateway(provider.clone());
        let revised = repair_dockerfile(
            &gateway,
            "gcc_cannot_find_library",
            "FROM ubuntu:24.04\nWORKDIR /workspace\nCOPY . /workspace\nRUN make",
            "make: command not found",
            &["src/main.c".to_string()],
            &EnvGenParams::default(),
        )
        .unwrap();
        assert!(revised.contains("apt-get install -y make"));
        // The off-base-image revision was rejected and re-prompted.
        assert_eq!(provider.calls(AgentRole::Env), 2);
        let request = &provider.requests_for(AgentRole::Env)[0];
        let user = &request.messages.last().unwrap().text;
        assert!(user.contains("make: command not found"));
    }

    #[test]
    fn compose_file_is_deterministic_and_resource_limited() {
        let a = compose_file("mytask", "run1/mytask:latest");
        let b = compose_file("mytask", "run1/mytask:latest");
        assert_eq!(a, b);
        assert!(a.contains("mytask:"));
        assert!(a.contains("image: run1/mytask:latest"));
        assert!(a.contains("cpus: 2"));
        assert!(a.contains("mem_limit: 4g"));
        assert!(a.contains("command: sleep infinity"));
    }

    #[test]
    fn task_yaml_round_trips_byte_identically() {
        let yaml = TaskYaml::from_spec(&spec(), 600);
        let first = yaml.to_yaml_string().unwrap();
        let parsed = TaskYaml::parse(&first).unwrap();
        assert_eq!(parsed, yaml);
        let second = parsed.to_yaml_string().unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn task_yaml_rejects_unknown_fields() {
        let text = "id: a\ncategory: b\ntier: c\ndescription: d\ninput_requirements: e\noutput_requirements: f\nsuccess_criteria: g\nmax_agent_timeout_sec: 60\nextra: nope\n";
        assert!(TaskYaml::parse(text).is_err());
    }

    #[test]
    fn write_bundle_produces_full_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("gcc_cannot_find_library");
        let artifacts = vec![
            EnvArtifact { path: "src/main.c".into(), content: "int main(){}".into(), executable: false },
            EnvArtifact { path: "bin/setup.sh".into(), content: "#!/bin/sh\n".into(), executable: true },
        ];
        let bundle = write_bundle(
            &root,
            &spec(),
            &artifacts,
            "FROM ubuntu:24.04\nCOPY . /workspace\n",
            "run1/gcc_cannot_find_library:latest",
            &EnvGenParams::default(),
        )
        .unwrap();
        for file in ["task.yaml", "Dockerfile", "docker-compose.yaml", "run-tests.sh", "src/main.c", "bin/setup.sh"] {
            assert!(root.join(file).is_file(), "{file} missing");
        }
        assert!(bundle.tests_dir().is_dir());
        use std::os::unix::fs::PermissionsExt;
        let runner_mode = fs::metadata(bundle.runner_path()).unwrap().permissions().mode();
        assert_eq!(runner_mode & 0o111, 0o111, "runner must be executable");
        let script_mode = fs::metadata(root.join("bin/setup.sh")).unwrap().permissions().mode();
        assert_eq!(script_mode & 0o111, 0o111, "script artifact must be executable");
        let data_mode = fs::metadata(root.join("src/main.c")).unwrap().permissions().mode();
        assert_eq!(data_mode & 0o111, 0, "data artifact must not be executable");
        let read_back = bundle.read_task_yaml().unwrap();
        assert_eq!(read_back.id, "gcc_cannot_find_library");
        assert_eq!(read_back.max_agent_timeout_sec, 600);
    }
}
