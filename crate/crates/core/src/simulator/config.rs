//! JSON-facing workload and cluster descriptions.

use serde::{Deserialize, Serialize};

use crate::early_exit::DetectorConfig;
use crate::intra_sched::{ExecutorState, DEFAULT_SAFETY_MARGIN};
use crate::workload::{PlantedMix, ProfileOverrideMap, SearchSpace, Step};

use super::SimError;

fn default_eval_interval() -> Step {
    10
}

fn default_profiling_steps() -> Step {
    20
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Training steps between validation evaluations.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: Step,
    /// Steps charged at task start for throughput and memory profiling.
    #[serde(default = "default_profiling_steps")]
    pub profiling_steps: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub gpu_requirement: u32,
    /// Optional cross-check; the simulator derives it from the search space.
    #[serde(default)]
    pub total_samples: Option<u64>,
    #[serde(default)]
    pub arrival_time: f64,
    pub search_space: SearchSpace,
    pub total_steps: Step,
    /// Explicit curves for selected job ids; all other jobs use planted curves.
    #[serde(default)]
    pub profile_overrides: ProfileOverrideMap,
    #[serde(default)]
    pub planted: PlantedMix,
    /// Multiplies every step time, e.g. for a larger base model.
    #[serde(default = "one")]
    pub cost_scale: f64,
}

/// Ground-truth device memory per rank: `k0 + k1 * B * seq_len` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub capacity: f64,
    pub k0: f64,
    pub k1: f64,
    #[serde(default = "default_margin")]
    pub safety_margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_SAFETY_MARGIN
}

impl Default for MemorySpec {
    fn default() -> Self {
        Self {
            capacity: 80e9,
            k0: 40e9,
            k1: 1e6,
            safety_margin: DEFAULT_SAFETY_MARGIN,
        }
    }
}

impl MemorySpec {
    pub fn measure(&self, total_batch: u64, seq_len: u32) -> f64 {
        self.k0 + self.k1 * total_batch as f64 * f64::from(seq_len)
    }
}

/// Executor step time.
///
/// Per rank: `t_base + t_token * (sum of b) * seq_len + t_pass * batch classes`;
/// the executor step is the slowest rank times a mode multiplier, plus
/// `t_sync` when more than one rank is busy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub t_base: f64,
    pub t_token: f64,
    pub t_pass: f64,
    pub t_sync: f64,
    pub seq_len: u32,
    pub mult_sequential: f64,
    pub mult_batched: f64,
    pub mult_adapter_parallel: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_base: 0.2,
            t_token: 4e-5,
            t_pass: 0.02,
            t_sync: 0.02,
            seq_len: 512,
            mult_sequential: 1.0,
            mult_batched: 1.0,
            mult_adapter_parallel: 1.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let vals = [
            self.t_base,
            self.t_token,
            self.t_pass,
            self.t_sync,
            self.mult_sequential,
            self.mult_batched,
            self.mult_adapter_parallel,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SimError::Input(
                "cost model coefficients must be finite and >= 0".into(),
            ));
        }
        if self.t_base <= 0.0 || self.seq_len == 0 {
            return Err(SimError::Input("t_base and seq_len must be > 0".into()));
        }
        if self.mult_sequential <= 0.0
            || self.mult_batched <= 0.0
            || self.mult_adapter_parallel <= 0.0
        {
            return Err(SimError::Input("mode multipliers must be > 0".into()));
        }
        if self.mult_batched > self.mult_sequential {
            return Err(SimError::Input(
                "batched multiplier must not exceed the sequential one".into(),
            ));
        }
        Ok(())
    }

    fn rank_time(&self, batch: u64, classes: usize) -> f64 {
        self.t_base
            + self.t_token * batch as f64 * f64::from(self.seq_len)
            + self.t_pass * classes as f64
    }

    /// Seconds for one step of every resident job.
    pub fn step_time(&self, ex: &ExecutorState, batched: bool) -> f64 {
        let busy: Vec<usize> = (0..ex.per_rank.len())
            .filter(|&r| !ex.per_rank[r].is_empty())
            .collect();
        let slowest = busy
            .iter()
            .map(|&r| self.rank_time(ex.rank_batch(r), ex.batch_classes(r)))
            .fold(0.0, f64::max);
        let mult = if !batched {
            self.mult_sequential
        } else if ex.rank_count > 1 {
            self.mult_adapter_parallel
        } else {
            self.mult_batched
        };
        let sync = if busy.len() > 1 { self.t_sync } else { 0.0 };
        mult * slowest + sync
    }

    /// One adapter alone, sequential mode.
    pub fn single_step_time(&self, batch_size: u32) -> f64 {
        self.mult_sequential * self.rank_time(u64::from(batch_size), 1)
    }
}

fn default_node_limit() -> u64 {
    5_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub gpus: u32,
    #[serde(default)]
    pub memory: MemorySpec,
    #[serde(default)]
    pub cost_model: CostModel,
    /// Search-node cap for the exact planner; a node cap keeps runs reproducible.
    #[serde(default = "default_node_limit")]
    pub solver_node_limit: u64,
    /// Planner prior: mean share of warmup survivors still training after
    /// selection, before detection exits thin them out.
    #[serde(default = "default_survival")]
    pub retained_survival: f64,
}

fn default_survival() -> f64 {
    0.7
}

impl ClusterSpec {
    pub fn new(gpus: u32) -> Self {
        Self {
            gpus,
            memory: MemorySpec::default(),
            cost_model: CostModel::default(),
            solver_node_limit: default_node_limit(),
            retained_survival: default_survival(),
        }
    }
}
