//! Core library for synthesizing verifiable terminal-task environments and
//! collecting error-injected agent trajectories for supervised fine-tuning.
//!
//! The pipeline stages, in dependency order:
//!
//! 1. [`taskgen`]: taxonomy-seeded task proposal with an evaluator-gated
//!    refinement loop.
//! 2. [`envgen`]: file planning and construction of a buildable environment
//!    bundle per accepted task.
//! 3. [`sandbox`]: container (or local-process) execution with a bounded
//!    build-with-repair loop and per-run session lifecycle.
//! 4. [`testgen`]: generation of a pytest verification suite gated by a
//!    judge and a non-vacuity dry run.
//! 5. [`collector`]: trajectory collection with stochastic error-intent
//!    injection, critic validation, and recovery labeling.
//! 6. [`agent`]: a plain solver agent used for pass-rate evaluation.
//! 7. [`dataset`]: trajectory persistence, threshold filtering, corpus
//!    statistics, chat-format export, and observation auditing.
//!
//! All model traffic flows through [`gateway`], which supports live,
//! record, and replay modes backed by append-only cassette files so every
//! downstream stage is reproducible offline.

pub mod agent;
pub mod collector;
pub mod dataset;
pub mod envgen;
pub mod gateway;
pub mod prompts;
pub mod sandbox;
pub mod shell;
pub mod taskgen;
pub mod testgen;
pub mod text;

#[cfg(test)]
mod testutil;
