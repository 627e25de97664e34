//! Building perturbed benchmarks for LLM tasks and optimizing prompts to be
//! robust against the perturbations.

pub mod backend;
pub mod metrics;
pub mod perturb;
pub mod pgo;
pub mod tasks;
