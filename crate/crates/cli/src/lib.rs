//! Command-line orchestration for the environment-synthesis and
//! trajectory-collection pipeline: run configuration, the run directory
//! layout, and the per-stage drivers behind each subcommand.

pub mod config;
pub mod rundir;
pub mod stages;

#[cfg(test)]
pub(crate) mod testfix;
