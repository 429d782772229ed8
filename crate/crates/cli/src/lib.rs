//! Experiment orchestration for the sparse-annotation crowd counting
//! library: declarative TOML specs, seeded deterministic runs, CSV/JSON
//! results.

pub mod experiment;
pub mod spec;
