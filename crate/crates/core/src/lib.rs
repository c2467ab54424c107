//! Orchestration engine for multi-adapter LoRA hyperparameter tuning.
//!
//! The crate is split along the pipeline a tuning workload goes through:
//!
//! - [`workload`]: search-space expansion, jobs, tasks and loss trajectories.
//! - [`early_exit`]: online divergence/overfitting detection and warmup selection.
//! - [`lora_math`]: dense reference of grouped base+adapter forward/backward.
//! - [`intra_sched`]: memory-model fitting, admission and backfill inside an executor.
//! - [`inter_sched`]: exact makespan scheduling of tasks onto GPUs.
//! - [`simulator`]: a deterministic discrete-event cluster simulator tying it together.

pub mod early_exit;
pub mod inter_sched;
pub mod intra_sched;
pub mod lora_math;
pub mod simulator;
pub mod workload;

/// Shortest decimal form that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
