//! Taxonomy-seeded task generation with evaluator-gated refinement.
//!
//! Seeds are short slugs drawn per taxonomy category. Each seed is expanded
//! by a proposer into a [`TaskDraft`] and scored by an evaluator on three
//! feasibility dimensions; a draft is accepted only when every dimension
//! scores above 4. Rejected drafts are refined with the evaluator's
//! feedback for up to three rounds, so one seed costs at most four
//! propose/evaluate pairs before it is discarded.

use crate::gateway::{AgentRole, Gateway, Message};
use crate::prompts::{parse_json_reply, LlmCall, PromptError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// One leaf category of the task taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// Stable dotted id, e.g. `1.1`.
    pub id: String,
    pub name: String,
    /// Representative goals and skills, rendered into seed prompts.
    pub competencies: Vec<String>,
    /// Example seed slugs illustrating the expected granularity.
    pub example_seeds: Vec<String>,
}

/// One difficulty tier grouping several categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tier {
    pub name: String,
    pub categories: Vec<Category>,
}

/// The hierarchical task domain taxonomy: three tiers, eleven categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub tiers: Vec<Tier>,
}

impl Taxonomy {
    /// The built-in taxonomy spanning infrastructure, data and algorithm
    /// applications, and specialized development domains.
    pub fn builtin() -> Self {
        fn cat(id: &str, name: &str, competencies: &[&str], seeds: &[&str]) -> Category {
            Category {
                id: id.to_string(),
                name: name.to_string(),
                competencies: competencies.iter().map(|s| s.to_string()).collect(),
                example_seeds: seeds.iter().map(|s| s.to_string()).collect(),
            }
        }
        Taxonomy {
            tiers: vec![
                Tier {
                    name: "Infrastructure & Core Systems".to_string(),
                    categories: vec![
                        cat(
                            "1.1",
                            "Software Build & Compilation",
                            &[
                                "Resolve dependency hell, linker errors, and cross-compilation issues",
                                "gcc", "cmake", "makefile", "rustc", "autotools", "ld",
                            ],
                            &[
                                "gcc_cannot_find_library",
                                "cmake_cuda_toolkit_not_found",
                                "rust_cargo_linker_failure",
                                "makefile_missing_separator",
                            ],
                        ),
                        cat(
                            "1.2",
                            "System Administration & DevOps",
                            &[
                                "Manage containers, orchestrate clusters, and debug system services",
                                "docker", "kubernetes", "systemd", "nginx", "terraform",
                            ],
                            &[
                                "kubernetes_pod_crashloop_backoff",
                                "docker_layer_caching_broken",
                                "nginx_upstream_keepalive_connections",
                                "systemd_unit_fails_on_boot",
                            ],
                        ),
                        cat(
                            "1.3",
                            "Security, Forensics & Reverse Engineering",
                            &[
                                "Exploit analysis, binary reversing, and digital forensics",
                                "ghidra", "wireshark", "metasploit", "gdb", "volatility",
                            ],
                            &[
                                "buffer_overflow_exploit_development",
                                "wireshark_pcap_analysis",
                                "ghidra_reverse_engineering_workflow",
                                "sqlmap_automated_injection",
                            ],
                        ),
                    ],
                },
                Tier {
                    name: "Data & Algorithm Applications".to_string(),
                    categories: vec![
                        cat(
                            "2.1",
                            "Data Processing & ETL",
                            &[
                                "Transform large-scale datasets and handle schema evolution",
                                "pandas", "spark", "kafka", "sql", "parquet", "jq",
                            ],
                            &[
                                "parquet_schema_evolution",
                                "kafka_avro_schema_registry",
                                "pandas_merge_asof_timeseries",
                                "spark_dataframe_schema_inference",
                            ],
                        ),
                        cat(
                            "2.2",
                            "Machine Learning & MLOps",
                            &[
                                "Debug training instability, optimize inference, and manage pipelines",
                                "pytorch", "cuda", "huggingface", "scikit-learn",
                            ],
                            &[
                                "cuda_out_of_memory",
                                "pytorch_dataloader_workers",
                                "transformers_token_limit",
                                "gradient_explosion_detection",
                            ],
                        ),
                        cat(
                            "2.3",
                            "Algorithms & Logic Puzzles",
                            &[
                                "Implement classic algorithms and solve competitive programming tasks",
                                "graph theory", "dynamic programming", "search (A*)", "CSP",
                            ],
                            &[
                                "n_queens_placement",
                                "shortest_path_dijkstra",
                                "alpha_beta_pruning_minimax",
                                "knapsack_dynamic_programming",
                            ],
                        ),
                    ],
                },
                Tier {
                    name: "Specialized Domains & Advanced Development".to_string(),
                    categories: vec![
                        cat(
                            "3.1",
                            "Software Dev, Porting & Bug Fixing",
                            &[
                                "Full-stack debugging, framework configuration, and legacy porting",
                                "react", "django", "git", "rest-api", "ci/cd",
                            ],
                            &[
                                "react_hooks_dependency_array",
                                "django_csrf_token_missing",
                                "git_merge_conflict_binary",
                                "rest_api_pagination_cursor",
                            ],
                        ),
                        cat(
                            "3.2",
                            "Scientific & Domain Computing",
                            &[
                                "Computational biology, chemistry simulations, and statistical modeling",
                                "bioconductor", "rdkit", "gromacs", "stan", "numpy",
                            ],
                            &[
                                "rdkit_mol_sanitization_error",
                                "stan_divergent_transitions",
                                "bioconductor_annotation_mismatch",
                                "gromacs_topology_atom_mismatch",
                            ],
                        ),
                        cat(
                            "3.3",
                            "Interactive Environments",
                            &[
                                "Handle real-time protocols, REPLs, and interactive debugging sessions",
                                "websocket", "ssh", "gdb-interactive", "jupyter",
                            ],
                            &[
                                "websocket_chat_server",
                                "interactive_sql_repl",
                                "gdb_interactive_debugging",
                                "jupyter_kernel_connection",
                            ],
                        ),
                        cat(
                            "3.4",
                            "Distributed & Parallel Computing",
                            &[
                                "Debug race conditions, deadlocks, and distributed consensus issues",
                                "mpi", "openmp", "ray", "dask", "slurm",
                            ],
                            &[
                                "mpi_deadlock_collective_ops",
                                "spark_executor_out_of_memory",
                                "ray_actor_died_unexpectedly",
                                "openmp_race_condition_shared",
                            ],
                        ),
                        cat(
                            "3.5",
                            "Formal Verification & Graphics",
                            &[
                                "Theorem proving, SAT solving, and rendering pipeline debugging",
                                "coq", "z3", "opengl", "vulkan", "blender",
                            ],
                            &[
                                "coq_universe_inconsistency",
                                "opengl_context_creation_headless",
                                "z3_timeout_optimization",
                                "vulkan_validation_layer_error",
                            ],
                        ),
                    ],
                },
            ],
        }
    }

    /// Checks the structural invariants: exactly three tiers, eleven
    /// categories in total, unique category ids, and no category without
    /// competencies.
    pub fn validate(&self) -> Result<(), TaskGenError> {
        if self.tiers.len() != 3 {
            return Err(TaskGenError::InvalidTaxonomy(format!(
                "expected 3 tiers, found {}",
                self.tiers.len()
            )));
        }
        let categories: Vec<&Category> =
            self.tiers.iter().flat_map(|t| t.categories.iter()).collect();
        if categories.len() != 11 {
            return Err(TaskGenError::InvalidTaxonomy(format!(
                "expected 11 categories, found {}",
                categories.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for category in categories {
            if !ids.insert(category.id.as_str()) {
                return Err(TaskGenError::InvalidTaxonomy(format!(
                    "duplicate category id {}",
                    category.id
                )));
            }
            if category.competencies.is_empty() {
                return Err(TaskGenError::InvalidTaxonomy(format!(
                    "category {} has no competencies",
                    category.id
                )));
            }
        }
        Ok(())
    }

    /// All categories with their tier names, in taxonomy order.
    pub fn categories(&self) -> impl Iterator<Item = (&str, &Category)> {
        self.tiers.iter().flat_map(|t| t.categories.iter().map(move |c| (t.name.as_str(), c)))
    }
}

/// A task seed: a distinct slug plus a one-paragraph summary, tied to the
/// taxonomy category it was drawn for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSeed {
    /// Lowercase `[a-z0-9_]` identifier, unique across a run. Doubles as
    /// the task id for every downstream artifact.
    pub slug: String,
    pub summary: String,
    pub category_id: String,
    pub category_name: String,
    pub tier: String,
}

/// Evaluator scores for one task draft. Each dimension is an integer in
/// 1..=5; a draft is accepted only when every dimension exceeds 4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityScore {
    pub environment_complexity: u8,
    pub data_generatability: u8,
    pub verification_determinism: u8,
    pub feedback: String,
}

impl FeasibilityScore {
    pub fn accepted(&self) -> bool {
        self.environment_complexity > 4
            && self.data_generatability > 4
            && self.verification_determinism > 4
    }

    fn check_range(&self) -> Result<(), String> {
        for (name, value) in [
            ("environment_complexity", self.environment_complexity),
            ("data_generatability", self.data_generatability),
            ("verification_determinism", self.verification_determinism),
        ] {
            if !(1..=5).contains(&value) {
                return Err(format!("{name} score {value} is outside 1..=5"));
            }
        }
        Ok(())
    }
}

/// Proposer output: the four textual fields of a task definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDraft {
    pub objective: String,
    pub input_requirements: String,
    pub output_requirements: String,
    pub success_criteria: String,
}

impl TaskDraft {
    fn check_complete(&self) -> Result<(), String> {
        for (name, value) in [
            ("objective", &self.objective),
            ("input_requirements", &self.input_requirements),
            ("output_requirements", &self.output_requirements),
            ("success_criteria", &self.success_criteria),
        ] {
            if value.trim().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        Ok(())
    }
}

/// An accepted, evaluator-approved task definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Equal to the seed slug; the task id used everywhere downstream.
    pub spec_id: String,
    pub seed: TaskSeed,
    pub objective: String,
    pub input_requirements: String,
    pub output_requirements: String,
    pub success_criteria: String,
    /// Refinement rounds consumed before acceptance; at most 3.
    pub refinement_rounds_used: u32,
    pub evaluation: FeasibilityScore,
}

/// Terminal outcome for a seed whose drafts never reached full marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub slug: String,
    /// Refinement rounds consumed; always the maximum when rejected.
    pub rounds_used: u32,
    pub last_score: FeasibilityScore,
}

/// Result of driving one seed through the propose/evaluate/refine loop.
#[derive(Debug, Clone, PartialEq)]
pub enum RefinementOutcome {
    Accepted(Box<TaskSpec>),
    Rejected(RejectionRecord),
}

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("category {category_id}: only {got} distinct seeds after {attempts} generation attempts, wanted {wanted}")]
    SeedShortfall { category_id: String, wanted: u32, got: u32, attempts: u32 },
}

/// Knobs for the generation loops. Defaults match the collection protocol.
#[derive(Debug, Clone)]
pub struct TaskGenParams {
    pub seeds_per_category: u32,
    /// Extra seed-generation calls allowed per category when the model
    /// returns duplicates.
    pub seed_regen_attempts: u32,
    /// Refinement rounds after the initial proposal.
    pub max_refinement_rounds: u32,
    pub propose_temperature: f64,
    pub evaluate_temperature: f64,
    pub reprompt_budget: u32,
}

impl Default for TaskGenParams {
    fn default() -> Self {
        TaskGenParams {
            seeds_per_category: 4,
            seed_regen_attempts: 3,
            max_refinement_rounds: 3,
            propose_temperature: 0.7,
            evaluate_temperature: 0.2,
            reprompt_budget: 2,
        }
    }
}

/// Cassette scope for seed-generation traffic, which precedes task ids.
pub const SEEDS_SCOPE: &str = "seeds";

fn valid_slug(slug: &str) -> bool {
    !slug.is_empty()
        && slug.len() <= 64
        && slug.chars().next().is_some_and(|c| c.is_ascii_lowercase())
        && slug.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Deserialize)]
struct SeedDraft {
    slug: String,
    summary: String,
}

/// Generates `seeds_per_category` distinct seeds for every taxonomy
/// category. Duplicate or malformed slugs trigger bounded regeneration;
/// a category that stays short is a hard error.
pub fn generate_seeds(
    gateway: &Gateway,
    taxonomy: &Taxonomy,
    params: &TaskGenParams,
) -> Result<Vec<TaskSeed>, TaskGenError> {
    taxonomy.validate()?;
    let call = LlmCall {
        gateway,
        scope: SEEDS_SCOPE,
        role: AgentRole::Proposer,
        temperature: params.propose_temperature,
        max_output_tokens: 2048,
        reprompt_budget: params.reprompt_budget,
    };
    let mut seeds: Vec<TaskSeed> = Vec::new();
    let mut taken: BTreeSet<String> = BTreeSet::new();
    for (tier, category) in taxonomy.categories() {
        let mut collected = 0u32;
        let mut attempts = 0u32;
        while collected < params.seeds_per_category {
            if attempts > params.seed_regen_attempts {
                return Err(TaskGenError::SeedShortfall {
                    category_id: category.id.clone(),
                    wanted: params.seeds_per_category,
                    got: collected,
                    attempts,
                });
            }
            attempts += 1;
            let needed = params.seeds_per_category - collected;
            let messages = seed_messages(tier, category, needed, &taken);
            let drafts: Vec<SeedDraft> = call.structured(messages, |text| {
                let drafts: Vec<SeedDraft> = parse_json_reply(text)?;
                for draft in &drafts {
                    if !valid_slug(&draft.slug) {
                        return Err(format!(
                            "slug {:?} must be lowercase [a-z0-9_], start with a letter, and be at most 64 chars",
                            draft.slug
                        ));
                    }
                    if draft.summary.trim().is_empty() {
                        return Err(format!("seed {} has an empty summary", draft.slug));
                    }
                }
                Ok(drafts)
            })?;
            for draft in drafts {
                if collected >= params.seeds_per_category {
                    break;
                }
                if taken.insert(draft.slug.clone()) {
                    collected += 1;
                    seeds.push(TaskSeed {
                        slug: draft.slug,
                        summary: draft.summary,
                        category_id: category.id.clone(),
                        category_name: category.name.clone(),
                        tier: tier.to_string(),
                    });
                } else {
                    tracing::debug!(slug = %draft.slug, "duplicate seed slug, regenerating");
                }
            }
        }
    }
    Ok(seeds)
}

fn seed_messages(tier: &str, category: &Category, count: u32, taken: &BTreeSet<String>) -> Vec<Message> {
    let mut user = format!(
        "Generate exactly {count} distinct terminal-task seeds for this domain category.\n\
         Tier: {tier}\nCategory {}: {}\nCompetencies: {}\n\
         Example seeds at the right granularity: {}\n\n\
         Each seed names one concrete, self-contained problem that can be solved \
         inside a single Linux container and verified by automated tests.\n\
         Reply with a JSON array of objects, each {{\"slug\": ..., \"summary\": ...}}. \
         Slugs are lowercase with underscores; summaries are one or two sentences.",
        category.id,
        category.name,
        category.competencies.join(", "),
        category.example_seeds.join(", "),
    );
    if !taken.is_empty() {
        user.push_str(&format!(
            "\n\nThese slugs are already taken, do not repeat them: {}",
            taken.iter().cloned().collect::<Vec<_>>().join(", ")
        ));
    }
    vec![
        Message::system(
            "You curate a broad corpus of verifiable terminal tasks. \
             You reply only with the requested JSON.",
        ),
        Message::user(user),
    ]
}

/// Asks the proposer for a draft. When `previous` is given, the prior
/// draft and its evaluation are included so the proposer can revise.
pub fn propose_task(
    gateway: &Gateway,
    seed: &TaskSeed,
    previous: Option<(&TaskDraft, &FeasibilityScore)>,
    params: &TaskGenParams,
) -> Result<TaskDraft, TaskGenError> {
    let call = LlmCall {
        gateway,
        scope: &seed.slug,
        role: AgentRole::Proposer,
        temperature: params.propose_temperature,
        max_output_tokens: 1536,
        reprompt_budget: params.reprompt_budget,
    };
    let mut user = format!(
        "Design a verifiable terminal task from this seed.\n\
         Seed: {} ({})\nCategory: {} {} (tier: {})\nSummary: {}\n\n\
         The task must be solvable by a command-line agent inside one Linux container, \
         with no network access at solve time, and must be checkable by a deterministic \
         test suite over files in /workspace.\n\
         Reply with JSON: {{\"objective\": ..., \"input_requirements\": ..., \
         \"output_requirements\": ..., \"success_criteria\": ...}}. All four values are \
         non-empty prose.",
        seed.slug, seed.tier, seed.category_id, seed.category_name, seed.tier, seed.summary,
    );
    if let Some((draft, score)) = previous {
        user.push_str(&format!(
            "\n\nYour previous draft was rejected by the feasibility evaluator.\n\
             Previous draft: {}\nScores: environment_complexity={}, data_generatability={}, \
             verification_determinism={}\nEvaluator feedback: {}\n\
             Revise the draft to address the feedback.",
            serde_json::to_string(draft).expect("draft serializes"),
            score.environment_complexity,
            score.data_generatability,
            score.verification_determinism,
            score.feedback,
        ));
    }
    let messages = vec![
        Message::system(
            "You design concrete, self-contained terminal tasks with deterministic \
             verification. You reply only with the requested JSON.",
        ),
        Message::user(user),
    ];
    Ok(call.structured(messages, |text| {
        let draft: TaskDraft = parse_json_reply(text)?;
        draft.check_complete()?;
        Ok(draft)
    })?)
}

/// Scores a draft on the three feasibility dimensions. Out-of-range scores
/// are rejected and re-prompted within the call's budget.
pub fn evaluate_task(
    gateway: &Gateway,
    seed: &TaskSeed,
    draft: &TaskDraft,
    params: &TaskGenParams,
) -> Result<FeasibilityScore, TaskGenError> {
    let call = LlmCall {
        gateway,
        scope: &seed.slug,
        role: AgentRole::Evaluator,
        temperature: params.evaluate_temperature,
        max_output_tokens: 512,
        reprompt_budget: params.reprompt_budget,
    };
    let messages = vec![
        Message::system(
            "You are a strict feasibility evaluator for terminal tasks. Score each \
             dimension as an integer from 1 (unusable) to 5 (fully satisfactory): \
             environment_complexity (the environment is rich enough to be interesting \
             yet buildable), data_generatability (all required fixtures can be \
             synthesized deterministically), verification_determinism (an automated \
             test suite can decide success without flakiness). \
             Reply only with JSON {\"environment_complexity\": n, \
             \"data_generatability\": n, \"verification_determinism\": n, \
             \"feedback\": \"...\"}.",
        ),
        Message::user(format!(
            "Seed: {} (category {} {})\nDraft: {}",
            seed.slug,
            seed.category_id,
            seed.category_name,
            serde_json::to_string(draft).expect("draft serializes"),
        )),
    ];
    Ok(call.structured(messages, |text| {
        let score: FeasibilityScore = parse_json_reply(text)?;
        score.check_range()?;
        Ok(score)
    })?)
}

/// Drives one seed through propose, evaluate, and refine until acceptance
/// or until `max_refinement_rounds` refinements have failed.
pub fn refine_until_accepted(
    gateway: &Gateway,
    seed: &TaskSeed,
    params: &TaskGenParams,
) -> Result<RefinementOutcome, TaskGenError> {
    let mut draft = propose_task(gateway, seed, None, params)?;
    let mut score = evaluate_task(gateway, seed, &draft, params)?;
    let mut rounds = 0u32;
    while !score.accepted() {
        if rounds == params.max_refinement_rounds {
            tracing::info!(slug = %seed.slug, rounds, "seed rejected after final refinement");
            return Ok(RefinementOutcome::Rejected(RejectionRecord {
                slug: seed.slug.clone(),
                rounds_used: rounds,
                last_score: score,
            }));
        }
        rounds += 1;
        draft = propose_task(gateway, seed, Some((&draft, &score)), params)?;
        score = evaluate_task(gateway, seed, &draft, params)?;
    }
    tracing::info!(slug = %seed.slug, rounds, "seed accepted");
    Ok(RefinementOutcome::Accepted(Box::new(TaskSpec {
        spec_id: seed.slug.clone(),
        seed: seed.clone(),
        objective: draft.objective,
        input_requirements: draft.input_requirements,
        output_requirements: draft.output_requirements,
        success_criteria: draft.success_criteria,
        refinement_rounds_used: rounds,
        evaluation: score,
    })))
}
