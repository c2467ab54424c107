//! Deterministic discrete-event simulation of a tuning cluster.
//!
//! Tasks arrive, get profiled, are placed onto GPUs (exact planner or FIFO
//! first-fit), and run their jobs through an executor that admits and backfills
//! adapters under the memory model. Jobs are evaluated every `eval_interval`
//! steps against pre-generated loss curves; with early exit enabled the online
//! detector and warmup selection retire redundant jobs.
//!
//! Events are ordered by `(time, kind, task_id, job_id, insertion)`. Evaluation
//! points and job exits happen inside the step-batch handler, visited in job id
//! order, so they never interleave with other events at the same instant.

pub mod config;
pub mod suites;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ClusterSpec, CostModel, MemorySpec, TaskSpec, WorkloadSpec};

use crate::early_exit::{
    observe, warmup_select, DetectorConfig, DetectorState, ExitDecision, ExitReason,
    WarmupCandidate,
};
use crate::inter_sched::{
    check_plan, replan, to_micros, to_secs, ClusterState, Micros, ReplanEvent, RunningTask,
    SchedTask, SolverConfig,
};
use crate::intra_sched::{
    admit, backfill, profile_memory, ExecutorState, MemoryModel, SlotRequest,
};
use crate::workload::{
    expand_search_space, generate_trajectory_with_alpha, plant_profiles, Job, JobStatus,
    LossTrajectory, Step,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl SimError {
    fn input(e: impl std::fmt::Display) -> Self {
        SimError::Input(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyFlags {
    pub batched: bool,
    pub scheduler: bool,
    pub early_exit: bool,
}

impl PolicyFlags {
    pub const B: Self = Self {
        batched: true,
        scheduler: false,
        early_exit: false,
    };
    pub const B_S: Self = Self {
        batched: true,
        scheduler: true,
        early_exit: false,
    };
    pub const B_EE: Self = Self {
        batched: true,
        scheduler: false,
        early_exit: true,
    };
    pub const B_S_EE: Self = Self {
        batched: true,
        scheduler: true,
        early_exit: true,
    };

    /// `B`, `S`, `EE` joined by `+`; `none` when all are off.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.batched {
            parts.push("B");
        }
        if self.scheduler {
            parts.push("S");
        }
        if self.early_exit {
            parts.push("EE");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Parses a comma-separated subset of `b`, `s`, `ee` (case-insensitive).
    pub fn parse(s: &str) -> Result<Self, SimError> {
        let mut f = Self {
            batched: false,
            scheduler: false,
            early_exit: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "b" => f.batched = true,
                "s" => f.scheduler = true,
                "ee" => f.early_exit = true,
                "none" => {}
                other => return Err(SimError::Input(format!("unknown policy flag `{other}`"))),
            }
        }
        Ok(f)
    }
}

/// Sub-seed for a named component: FNV-1a over the seed and name, then a
/// splitmix64 finalizer.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(component.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    TaskComplete,
    JobExit,
    EvalPoint,
    StepBatchComplete,
    Arrival,
    Replan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Micros,
    kind: EventKind,
    task: u32,
    job: u32,
    seq: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplesSaved {
    pub diverging: u64,
    pub overfitting: u64,
    pub underperforming: u64,
}

impl SamplesSaved {
    pub fn total(&self) -> u64 {
        self.diverging + self.overfitting + self.underperforming
    }

    pub fn get(&self, reason: ExitReason) -> u64 {
        match reason {
            ExitReason::Diverging => self.diverging,
            ExitReason::Overfitting => self.overfitting,
            ExitReason::Underperforming => self.underperforming,
        }
    }

    fn add(&mut self, reason: ExitReason, n: u64) {
        match reason {
            ExitReason::Diverging => self.diverging += n,
            ExitReason::Overfitting => self.overfitting += n,
            ExitReason::Underperforming => self.underperforming += n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub task_id: u32,
    pub job_id: u32,
    pub status: JobStatus,
    pub best_val: Option<(Step, f64)>,
    pub exit_step: Option<Step>,
    pub steps_trained: Step,
    pub samples_trained: u64,
    pub samples_scheduled: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanttRecord {
    pub task_id: u32,
    pub gpu_ids: Vec<u32>,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: u32,
    pub gpus: u32,
    pub start: f64,
    pub end: f64,
    /// Planner estimate: profiling overhead plus planned samples over throughput.
    /// Without early exit the planned samples are `total_samples`.
    pub duration_estimate: f64,
    pub throughput: f64,
    pub best_job: Option<u32>,
    pub best_val: Option<f64>,
    /// Best validation loss over all jobs' full curves (the no-exit replay).
    pub reference_best_val: f64,
    pub loss_ratio: Option<f64>,
    pub planted_best: Option<u32>,
    pub planted_best_completed: bool,
    pub samples_total: u64,
    pub samples_trained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub flags: PolicyFlags,
    pub seed: u64,
    pub makespan: f64,
    pub samples_total: u64,
    pub samples_trained: u64,
    pub samples_saved: SamplesSaved,
    /// Worst per-task ratio of best validation loss with vs without early exit.
    pub loss_ratio: Option<f64>,
    pub tasks: Vec<TaskOutcome>,
    pub per_job: Vec<JobOutcome>,
    pub gantt: Vec<GanttRecord>,
    /// Admission events, each followed by a memory-safety check.
    pub admissions: u64,
    /// Largest per-rank total batch ever resident.
    pub max_rank_batch: u64,
    pub replans: u64,
    /// Whether every exact plan was proven optimal.
    pub plans_optimal: bool,
}

impl SimReport {
    pub fn saved_fraction(&self, reason: ExitReason) -> f64 {
        if self.samples_total == 0 {
            0.0
        } else {
            self.samples_saved.get(reason) as f64 / self.samples_total as f64
        }
    }

    pub fn total_saved_fraction(&self) -> f64 {
        if self.samples_total == 0 {
            0.0
        } else {
            self.samples_saved.total() as f64 / self.samples_total as f64
        }
    }

    /// `reason,samples,fraction` rows, one per exit reason.
    pub fn samples_saved_csv(&self) -> String {
        let mut out = String::from("reason,samples,fraction\n");
        for r in ExitReason::ALL {
            out.push_str(&format!(
                "{},{},{}\n",
                r.as_str(),
                self.samples_saved.get(r),
                crate::fmt_f64(self.saved_fraction(r))
            ));
        }
        out
    }
}

/// One Gantt row per task occupancy interval, sorted by start then task id.
pub fn emit_gantt(report: &SimReport) -> Vec<GanttRecord> {
    let mut rows = report.gantt.clone();
    rows.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task_id.cmp(&b.task_id)));
    rows
}

pub fn gantt_csv(rows: &[GanttRecord]) -> String {
    let mut out = String::from("task_id,start,end,gpu_ids\n");
    for r in rows {
        let ids: Vec<String> = r.gpu_ids.iter().map(u32::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.task_id,
            crate::fmt_f64(r.start),
            crate::fmt_f64(r.end),
            ids.join(";")
        ));
    }
    out
}

/// Seed-dependent inputs shared by every policy combination.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub spec: TaskSpec,
    pub jobs: Vec<Job>,
    pub curves: Vec<LossTrajectory>,
    pub planted_best: Option<u32>,
    pub model: MemoryModel,
    pub reference_best_val: f64,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub workload: WorkloadSpec,
    pub cluster: ClusterSpec,
    pub seed: u64,
    pub tasks: Vec<PreparedTask>,
}

/// Validates inputs, profiles memory and generates every job's loss curve.
pub fn prepare(
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    seed: u64,
) -> Result<Prepared, SimError> {
    cluster.cost_model.validate()?;
    workload.detector.validate().map_err(SimError::input)?;
    if cluster.gpus == 0 {
        return Err(SimError::Input("cluster needs at least one GPU".into()));
    }
    if !(cluster.retained_survival > 0.0 && cluster.retained_survival <= 1.0) {
        return Err(SimError::Input(
            "retained_survival must be in (0, 1]".into(),
        ));
    }
    if workload.eval_interval == 0 {
        return Err(SimError::Input("eval_interval must be >= 1".into()));
    }
    let mut ids: Vec<u32> = workload.tasks.iter().map(|t| t.task_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(SimError::Input("duplicate task_id".into()));
    }
    let mem = cluster.memory;
    let seq_len = cluster.cost_model.seq_len;
    let profile = profile_memory(
        |b| mem.measure(b, seq_len),
        mem.capacity,
        mem.safety_margin,
        seq_len,
    )
    .map_err(SimError::input)?;
    let model = MemoryModel {
        k0: profile.fit.k0,
        k1: profile.fit.k1,
        seq_len,
        capacity: mem.capacity,
        safety_margin: mem.safety_margin,
    };
    model.validate().map_err(SimError::input)?;

    let mut tasks = Vec::with_capacity(workload.tasks.len());
    for spec in &workload.tasks {
        let tid = spec.task_id;
        if spec.gpu_requirement == 0 || spec.gpu_requirement > cluster.gpus {
            return Err(SimError::Input(format!(
                "task {tid} requires {} GPUs; cluster has {}",
                spec.gpu_requirement, cluster.gpus
            )));
        }
        if !(spec.arrival_time.is_finite() && spec.arrival_time >= 0.0) {
            return Err(SimError::Input(format!(
                "task {tid} has an invalid arrival_time"
            )));
        }
        if !(spec.cost_scale.is_finite() && spec.cost_scale > 0.0) {
            return Err(SimError::Input(format!(
                "task {tid} has an invalid cost_scale"
            )));
        }
        let jobs =
            expand_search_space(&spec.search_space, spec.total_steps).map_err(SimError::input)?;
        if spec.total_steps == 0 {
            return Err(SimError::Input(format!("task {tid} has total_steps = 0")));
        }
        let total: u64 = jobs.iter().map(Job::scheduled_samples).sum();
        if let Some(declared) = spec.total_samples {
            if declared != total {
                return Err(SimError::Input(format!(
                    "task {tid} declares total_samples {declared} but its search space schedules {total}"
                )));
            }
        }
        for j in &jobs {
            if !model.fits(u64::from(j.params.per_adapter_batch_size)) {
                return Err(SimError::Input(format!(
                    "task {tid} job {} with batch size {} does not fit in GPU memory",
                    j.job_id, j.params.per_adapter_batch_size
                )));
            }
        }
        if let Some(&bad) = spec
            .profile_overrides
            .keys()
            .find(|&&k| k as usize >= jobs.len())
        {
            return Err(SimError::Input(format!(
                "task {tid} overrides unknown job {bad}"
            )));
        }
        let planted = plant_profiles(
            jobs.len(),
            &spec.planted,
            spec.total_steps,
            derive_seed(seed, &format!("plant/{tid}")),
        )
        .map_err(SimError::input)?;
        let mut planted_best = Some(planted.best_job);
        let mut curves = Vec::with_capacity(jobs.len());
        for (i, p) in planted.profiles.iter().enumerate() {
            let profile = match spec.profile_overrides.get(&(i as u32)) {
                Some(o) => {
                    planted_best = None;
                    o
                }
                None => p,
            };
            let s = derive_seed(seed, &format!("curve/{tid}/{i}"));
            curves.push(
                generate_trajectory_with_alpha(
                    profile,
                    spec.total_steps,
                    workload.eval_interval,
                    s,
                    workload.detector.alpha,
                )
                .map_err(|e| SimError::Input(format!("task {tid} job {i}: {e}")))?,
            );
        }
        let reference_best_val = curves
            .iter()
            .filter_map(|c| c.best_val().map(|b| b.1))
            .fold(f64::INFINITY, f64::min);
        tasks.push(PreparedTask {
            spec: spec.clone(),
            jobs,
            curves,
            planted_best,
            model,
            reference_best_val,
        });
    }
    Ok(Prepared {
        workload: workload.clone(),
        cluster: cluster.clone(),
        seed,
        tasks,
    })
}

pub fn run(
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    flags: PolicyFlags,
    seed: u64,
) -> Result<SimReport, SimError> {
    let prepared = prepare(workload, cluster, seed)?;
    run_prepared(&prepared, flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub b: SimReport,
    pub b_s: SimReport,
    pub b_ee: SimReport,
    pub b_s_ee: SimReport,
    /// `makespan(B) / makespan(X)` keyed by the label of X.
    pub ratios: BTreeMap<String, f64>,
}

impl AblationReport {
    pub fn reports(&self) -> [&SimReport; 4] {
        [&self.b, &self.b_s, &self.b_ee, &self.b_s_ee]
    }
}

pub fn ablate(
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    seed: u64,
) -> Result<AblationReport, SimError> {
    let prepared = prepare(workload, cluster, seed)?;
    let b = run_prepared(&prepared, PolicyFlags::B)?;
    let b_s = run_prepared(&prepared, PolicyFlags::B_S)?;
    let b_ee = run_prepared(&prepared, PolicyFlags::B_EE)?;
    let b_s_ee = run_prepared(&prepared, PolicyFlags::B_S_EE)?;
    let ratio = |r: &SimReport| {
        if r.makespan > 0.0 {
            b.makespan / r.makespan
        } else {
            1.0
        }
    };
    let ratios = [&b_s, &b_ee, &b_s_ee]
        .iter()
        .map(|r| (r.flags.label(), ratio(r)))
        .collect();
    Ok(AblationReport {
        b,
        b_s,
        b_ee,
        b_s_ee,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Warmup,
    Training,
}

#[derive(Debug, Clone)]
struct JobRt {
    job: Job,
    steps: Step,
    target: Step,
    det: DetectorState,
    exit_step: Option<Step>,
    parked: bool,
}

#[derive(Debug, Clone)]
struct TaskRt {
    idx: usize,
    jobs: Vec<JobRt>,
    phase: Phase,
    executor: ExecutorState,
    queue: Vec<u32>,
    throughput: f64,
    overhead: f64,
    /// Expected seconds after warmup selection, zero without early exit.
    post_warmup: f64,
    estimate: f64,
    arrived: bool,
    start: Option<Micros>,
    end: Option<Micros>,
    train_begin: Micros,
    gpu_ids: Vec<u32>,
}

impl TaskRt {
    /// Seconds of training left as the planner sees it.
    fn remaining_secs(&self, tick: f64) -> f64 {
        let live = || self.jobs.iter().filter(|j| !j.job.status.is_terminal());
        if self.phase == Phase::Warmup {
            let warm: f64 = live()
                .map(|j| {
                    (j.target.saturating_sub(j.steps)
                        * u64::from(j.job.params.per_adapter_batch_size)) as f64
                })
                .sum();
            return warm / self.throughput + self.post_warmup;
        }
        if self.queue.is_empty() {
            // Everything left is resident: the longest job sets the pace.
            let steps = live()
                .map(|j| j.target.saturating_sub(j.steps))
                .max()
                .unwrap_or(0);
            return steps as f64 * tick;
        }
        let samples: u64 = live()
            .map(|j| {
                (j.target.saturating_sub(j.steps)) * u64::from(j.job.params.per_adapter_batch_size)
            })
            .sum();
        samples as f64 / self.throughput
    }
}

struct Engine<'a> {
    p: &'a Prepared,
    flags: PolicyFlags,
    tasks: Vec<TaskRt>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: Micros,
    gpu_busy: Vec<Option<u32>>,
    replan_pending: Option<Micros>,
    admissions: u64,
    max_rank_batch: u64,
    replans: u64,
    plans_optimal: bool,
}

fn slot(j: &Job) -> SlotRequest {
    SlotRequest {
        job_id: j.job_id,
        batch_size: j.params.per_adapter_batch_size,
    }
}

fn illegal(e: impl std::fmt::Display) -> SimError {
    SimError::Invariant(e.to_string())
}

/// Initial admission set on an empty executor, used for profiling.
fn initial_executor(pt: &PreparedTask, batched: bool) -> ExecutorState {
    let ranks = if batched { pt.spec.gpu_requirement } else { 1 };
    let mut ex = ExecutorState::new(ranks);
    if batched {
        let pending: Vec<SlotRequest> = pt.jobs.iter().map(slot).collect();
        admit(&mut ex, &pending, &pt.model);
    } else if let Some(j) = pt.jobs.first() {
        admit(&mut ex, &[slot(j)], &pt.model);
    }
    ex
}

/// Expected post-selection time for a retained set strided over batch sizes.
/// `survival` is the mean share of retained jobs still training; it scales the
/// retained samples at the profiled rate and the token cost of the paced bound.
fn profile_post_warmup(
    pt: &PreparedTask,
    cost: &CostModel,
    det: &DetectorConfig,
    batched: bool,
    throughput: f64,
    survival: f64,
) -> f64 {
    let n = pt.jobs.len();
    let warmup = det.warmup_steps(pt.spec.total_steps);
    if n == 0 || warmup == 0 {
        return 0.0;
    }
    let k = ((det.warmup_select_ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut by_batch: Vec<&Job> = pt.jobs.iter().collect();
    by_batch.sort_by_key(|j| (j.params.per_adapter_batch_size, j.job_id));
    let kept: Vec<&Job> = (0..k)
        .map(|m| by_batch[(2 * m + 1) * n / (2 * k)])
        .collect();
    let samples: f64 = kept
        .iter()
        .map(|j| {
            (j.total_steps.saturating_sub(warmup) * u64::from(j.params.per_adapter_batch_size))
                as f64
        })
        .sum();
    let steps = kept
        .iter()
        .map(|j| j.total_steps.saturating_sub(warmup))
        .max()
        .unwrap_or(0);
    let mut ex = ExecutorState::new(if batched { pt.spec.gpu_requirement } else { 1 });
    let pending: Vec<SlotRequest> = kept.iter().map(|j| slot(j)).collect();
    admit(
        &mut ex,
        if batched { &pending } else { &pending[..1] },
        &pt.model,
    );
    // Token cost of the busiest rank shrinks with the surviving share.
    let busiest = (0..ex.per_rank.len())
        .map(|r| ex.rank_batch(r))
        .max()
        .unwrap_or(0) as f64;
    let mult = if ex.rank_count > 1 {
        cost.mult_adapter_parallel
    } else {
        cost.mult_batched
    };
    let token_cut = mult * cost.t_token * f64::from(cost.seq_len) * (1.0 - survival) * busiest;
    let paced = if batched {
        steps as f64 * pt.spec.cost_scale * (cost.step_time(&ex, true) - token_cut)
    } else {
        0.0
    };
    (survival * samples / throughput).max(paced)
}

/// Profiled throughput (samples/s) and the profiling overhead in seconds.
fn profile_task(
    pt: &PreparedTask,
    cost: &CostModel,
    batched: bool,
    profiling_steps: Step,
) -> (f64, f64) {
    let scale = pt.spec.cost_scale;
    let ex = initial_executor(pt, batched);
    let tick = scale * cost.step_time(&ex, batched);
    let throughput = if batched {
        ex.total_batch() as f64 / tick
    } else {
        // One adapter at a time: samples over the summed per-adapter step times.
        let samples: u64 = pt.jobs.iter().map(Job::scheduled_samples).sum();
        let secs: f64 = pt
            .jobs
            .iter()
            .map(|j| {
                j.total_steps as f64
                    * scale
                    * cost.single_step_time(j.params.per_adapter_batch_size)
            })
            .sum();
        samples as f64 / secs
    };
    (throughput, profiling_steps as f64 * tick)
}

/// Event-driven simulation over prepared inputs.
pub fn run_prepared(p: &Prepared, flags: PolicyFlags) -> Result<SimReport, SimError> {
    let cost = &p.cluster.cost_model;
    let mut tasks = Vec::with_capacity(p.tasks.len());
    for (idx, pt) in p.tasks.iter().enumerate() {
        let (throughput, overhead) =
            profile_task(pt, cost, flags.batched, p.workload.profiling_steps);
        let total: u64 = pt.jobs.iter().map(Job::scheduled_samples).sum();
        let mut task = crate::workload::Task {
            task_id: pt.spec.task_id,
            gpu_requirement: pt.spec.gpu_requirement,
            jobs: Vec::new(),
            total_samples: total,
            throughput: None,
            duration_estimate: None,
            arrival_time: pt.spec.arrival_time,
        };
        task.set_throughput(throughput);
        let det = &p.workload.detector;
        let warmup = det.warmup_steps(pt.spec.total_steps);
        let post_warmup = if flags.early_exit && warmup > 0 {
            profile_post_warmup(
                pt,
                cost,
                det,
                flags.batched,
                throughput,
                p.cluster.retained_survival,
            )
        } else {
            0.0
        };
        let estimate = overhead
            + if flags.early_exit && warmup > 0 {
                let warm: u64 = pt
                    .jobs
                    .iter()
                    .map(|j| warmup.min(j.total_steps) * u64::from(j.params.per_adapter_batch_size))
                    .sum();
                warm as f64 / throughput + post_warmup
            } else {
                total as f64 / throughput
            };
        tasks.push(TaskRt {
            idx,
            jobs: pt
                .jobs
                .iter()
                .map(|j| JobRt {
                    job: j.clone(),
                    steps: 0,
                    target: j.total_steps,
                    det: DetectorState::default(),
                    exit_step: None,
                    parked: false,
                })
                .collect(),
            phase: Phase::Training,
            executor: ExecutorState::new(1),
            queue: Vec::new(),
            throughput,
            overhead,
            post_warmup,
            estimate,
            arrived: false,
            start: None,
            end: None,
            train_begin: 0,
            gpu_ids: Vec::new(),
        });
    }
    let mut eng = Engine {
        p,
        flags,
        tasks,
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0,
        gpu_busy: vec![None; p.cluster.gpus as usize],
        replan_pending: None,
        admissions: 0,
        max_rank_batch: 0,
        replans: 0,
        plans_optimal: true,
    };
    for i in 0..eng.tasks.len() {
        let t = to_micros(p.tasks[i].spec.arrival_time);
        eng.push(t, EventKind::Arrival, i as u32, 0);
    }
    while let Some(Reverse(ev)) = eng.heap.pop() {
        if ev.time < eng.now {
            return Err(SimError::Invariant("event scheduled in the past".into()));
        }
        eng.now = ev.time;
        match ev.kind {
            EventKind::Arrival => {
                eng.tasks[ev.task as usize].arrived = true;
                eng.request_replan();
            }
            EventKind::Replan => {
                eng.replan_pending = None;
                let trigger = if ev.job == 0 {
                    ReplanEvent::TaskArrival { task_id: ev.task }
                } else {
                    ReplanEvent::TaskCompletion { task_id: ev.task }
                };
                eng.replan(trigger)?;
            }
            EventKind::StepBatchComplete => eng.step(ev.task as usize)?,
            EventKind::TaskComplete => eng.complete(ev.task as usize)?,
            EventKind::EvalPoint | EventKind::JobExit => {
                unreachable!("handled inside the step-batch handler")
            }
        }
    }
    eng.report()
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: Micros, kind: EventKind, task: u32, job: u32) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            kind,
            task,
            job,
            seq: self.seq,
        }));
    }

    fn request_replan(&mut self) {
        if self.replan_pending != Some(self.now) {
            self.replan_pending = Some(self.now);
            self.push(self.now, EventKind::Replan, 0, 0);
        }
    }

    fn pt(&self, i: usize) -> &'a PreparedTask {
        &self.p.tasks[self.tasks[i].idx]
    }

    fn replan(&mut self, trigger: ReplanEvent) -> Result<(), SimError> {
        self.replans += 1;
        let queued: Vec<usize> = (0..self.tasks.len())
            .filter(|&i| self.tasks[i].arrived && self.tasks[i].start.is_none())
            .collect();
        if queued.is_empty() {
            return Ok(());
        }
        if self.flags.scheduler {
            let now_s = to_secs(self.now);
            // Planner ids: queued tasks by descending estimated area, so that
            // among equal-makespan plans the big tasks start first; running
            // tasks follow.
            let mut queued = queued;
            queued.sort_by(|&a, &b| {
                let area =
                    |i: usize| self.tasks[i].estimate * f64::from(self.pt(i).spec.gpu_requirement);
                area(b).total_cmp(&area(a)).then(a.cmp(&b))
            });
            let q = queued.len() as u32;
            let running_ids: Vec<usize> = (0..self.tasks.len())
                .filter(|&i| self.tasks[i].start.is_some() && self.tasks[i].end.is_none())
                .collect();
            let running: Vec<RunningTask> = running_ids
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let t = &self.tasks[i];
                    let overhead_left = to_secs(t.train_begin.saturating_sub(self.now));
                    RunningTask {
                        task_id: q + k as u32,
                        gpu_ids: t.gpu_ids.clone(),
                        start: to_secs(t.start.expect("running")),
                        remaining: overhead_left + t.remaining_secs(to_secs(self.tick(i))),
                    }
                })
                .collect();
            let state = ClusterState {
                now: now_s,
                gpus: self.p.cluster.gpus,
                queued: queued
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| SchedTask {
                        task_id: k as u32,
                        duration: self.tasks[i].estimate,
                        gpus: self.pt(i).spec.gpu_requirement,
                    })
                    .collect(),
                running,
            };
            let cfg = SolverConfig {
                time_limit: None,
                node_limit: Some(self.p.cluster.solver_node_limit),
            };
            let plan = replan(&state, trigger, cfg).map_err(illegal)?;
            self.plans_optimal &= plan.optimal;
            let reqs: Vec<(u32, u32)> = state
                .queued
                .iter()
                .map(|t| (t.task_id, t.gpus))
                .chain(
                    state
                        .running
                        .iter()
                        .map(|r| (r.task_id, r.gpu_ids.len() as u32)),
                )
                .collect();
            check_plan(&plan, self.p.cluster.gpus, &reqs).map_err(illegal)?;
            for (k, &i) in queued.iter().enumerate() {
                let a = plan.get(k as u32).expect("every queued task is planned");
                if to_micros(a.start) == self.now || (a.start - now_s).abs() < 1e-9 {
                    self.launch(i, a.gpu_ids.clone())?;
                }
            }
        } else {
            let mut order = queued;
            order.sort_by(|&a, &b| {
                let (sa, sb) = (&self.pt(a).spec, &self.pt(b).spec);
                sa.arrival_time
                    .total_cmp(&sb.arrival_time)
                    .then(sa.task_id.cmp(&sb.task_id))
            });
            for i in order {
                let g = self.pt(i).spec.gpu_requirement as usize;
                let free: Vec<u32> = (0..self.gpu_busy.len())
                    .filter(|&k| self.gpu_busy[k].is_none())
                    .map(|k| k as u32)
                    .collect();
                if free.len() >= g {
                    self.launch(i, free[..g].to_vec())?;
                }
            }
        }
        Ok(())
    }

    fn launch(&mut self, i: usize, gpu_ids: Vec<u32>) -> Result<(), SimError> {
        let g = self.pt(i).spec.gpu_requirement as usize;
        if gpu_ids.len() != g {
            return Err(SimError::Invariant(format!(
                "task {i} launched on {} GPUs, needs {g}",
                gpu_ids.len()
            )));
        }
        for &k in &gpu_ids {
            match self.gpu_busy.get(k as usize) {
                Some(None) => self.gpu_busy[k as usize] = Some(i as u32),
                _ => {
                    return Err(SimError::Invariant(format!(
                        "GPU {k} is not free for task {i}"
                    )))
                }
            }
        }
        let busy = self.gpu_busy.iter().filter(|b| b.is_some()).count();
        if busy > self.p.cluster.gpus as usize {
            return Err(SimError::Invariant("GPU capacity exceeded".into()));
        }
        let ee = self.flags.early_exit;
        let warmup = self
            .p
            .workload
            .detector
            .warmup_steps(self.pt(i).spec.total_steps);
        let batched = self.flags.batched;
        let now = self.now;
        let overhead = to_micros(self.tasks[i].overhead);
        {
            let t = &mut self.tasks[i];
            t.start = Some(now);
            t.gpu_ids = gpu_ids;
            t.train_begin = now + overhead;
            t.executor = ExecutorState::new(if batched { g as u32 } else { 1 });
            t.phase = if ee && warmup > 0 {
                Phase::Warmup
            } else {
                Phase::Training
            };
            for j in &mut t.jobs {
                j.job.transition(JobStatus::Warmup).map_err(illegal)?;
                if t.phase == Phase::Training {
                    j.job.transition(JobStatus::Training).map_err(illegal)?;
                } else {
                    j.target = warmup;
                }
            }
            t.queue = t.jobs.iter().map(|j| j.job.job_id).collect();
        }
        self.fill(i)?;
        if self.tasks[i].executor.is_empty() {
            return Err(SimError::Invariant(format!("task {i} admitted no job")));
        }
        let tick = self.tick(i);
        let at = self.tasks[i].train_begin + tick;
        self.push(at, EventKind::StepBatchComplete, i as u32, 0);
        Ok(())
    }

    fn tick(&self, i: usize) -> Micros {
        let t = &self.tasks[i];
        let secs = self.pt(i).spec.cost_scale
            * self
                .p
                .cluster
                .cost_model
                .step_time(&t.executor, self.flags.batched);
        to_micros(secs).max(1)
    }

    fn check_memory(&mut self, i: usize) -> Result<(), SimError> {
        self.admissions += 1;
        let pt = self.pt(i);
        let mem = self.p.cluster.memory;
        let seq_len = self.p.cluster.cost_model.seq_len;
        let ex = &self.tasks[i].executor;
        for r in 0..ex.per_rank.len() {
            let b = ex.rank_batch(r);
            self.max_rank_batch = self.max_rank_batch.max(b);
            if b > 0 && mem.measure(b, seq_len) > mem.capacity {
                return Err(SimError::Invariant(format!(
                    "task {i} rank {r} exceeds device memory"
                )));
            }
        }
        if !ex.is_safe(&pt.model) {
            return Err(SimError::Invariant(format!(
                "task {i} violates the memory budget"
            )));
        }
        Ok(())
    }

    /// Admits queued jobs while they fit.
    fn fill(&mut self, i: usize) -> Result<(), SimError> {
        let model = self.pt(i).model;
        let batched = self.flags.batched;
        let t = &mut self.tasks[i];
        if t.queue.is_empty() {
            return Ok(());
        }
        let pending: Vec<SlotRequest> = if batched {
            t.queue
                .iter()
                .map(|&id| slot(&t.jobs[id as usize].job))
                .collect()
        } else if t.executor.is_empty() {
            vec![slot(&t.jobs[t.queue[0] as usize].job)]
        } else {
            Vec::new()
        };
        if pending.is_empty() {
            return Ok(());
        }
        let admitted = admit(&mut t.executor, &pending, &model);
        if admitted.is_empty() {
            return Ok(());
        }
        t.queue
            .retain(|id| !admitted.iter().any(|a| a.job_id == *id));
        self.check_memory(i)
    }

    /// Takes a job off the executor and refills its slot.
    fn vacate(&mut self, i: usize, job_id: u32) -> Result<(), SimError> {
        let model = self.pt(i).model;
        if self.flags.batched {
            let t = &mut self.tasks[i];
            let queue: Vec<SlotRequest> = t
                .queue
                .iter()
                .map(|&id| slot(&t.jobs[id as usize].job))
                .collect();
            if let Some(a) = backfill(&mut t.executor, job_id, &queue, &model) {
                t.queue.retain(|&id| id != a.job_id);
                self.check_memory(i)?;
            }
        } else {
            self.tasks[i].executor.remove(job_id);
        }
        self.fill(i)
    }

    fn step(&mut self, i: usize) -> Result<(), SimError> {
        let ee = self.flags.early_exit;
        let eval = self.p.workload.eval_interval;
        let det_cfg = &self.p.workload.detector;
        let pt = self.pt(i);
        let resident: Vec<u32> = self.tasks[i]
            .executor
            .resident()
            .iter()
            .map(|s| s.job_id)
            .collect();
        for job_id in resident {
            let curve = &pt.curves[job_id as usize];
            let phase = self.tasks[i].phase;
            let j = &mut self.tasks[i].jobs[job_id as usize];
            j.steps += 1;
            let step = j.steps;
            if step.is_multiple_of(eval) {
                if let Some(&(_, val)) = curve.val.get((step / eval - 1) as usize) {
                    j.job.record_val(step, val);
                    if ee {
                        let ema = curve.ema_at(step).expect("train loss at every step");
                        let decision = observe(&mut j.det, det_cfg, (step, ema), (step, val));
                        if let ExitDecision::Exit { reason, .. } = decision {
                            // Overfitting exits are not a legal warmup transition; the
                            // counter stays armed for the training phase.
                            if !(phase == Phase::Warmup && reason == ExitReason::Overfitting) {
                                j.job.transition(reason.status()).map_err(illegal)?;
                                j.exit_step = Some(step);
                                self.vacate(i, job_id)?;
                                continue;
                            }
                        }
                    }
                }
            }
            if step >= j.target {
                if phase == Phase::Warmup {
                    j.parked = true;
                } else {
                    j.job.transition(JobStatus::Completed).map_err(illegal)?;
                }
                self.vacate(i, job_id)?;
            }
        }

        let t = &self.tasks[i];
        if t.phase == Phase::Warmup && t.queue.is_empty() && t.executor.is_empty() {
            self.select_after_warmup(i)?;
        }
        let t = &self.tasks[i];
        if t.executor.is_empty() {
            if !t.queue.is_empty() {
                return Err(SimError::Invariant(format!(
                    "task {i} stalled with queued jobs"
                )));
            }
            self.push(self.now, EventKind::TaskComplete, i as u32, 0);
        } else {
            let at = self.now + self.tick(i);
            self.push(at, EventKind::StepBatchComplete, i as u32, 0);
        }
        Ok(())
    }

    fn select_after_warmup(&mut self, i: usize) -> Result<(), SimError> {
        let ratio = self.p.workload.detector.warmup_select_ratio;
        let pt = self.pt(i);
        let t = &mut self.tasks[i];
        let candidates: Vec<WarmupCandidate> = t
            .jobs
            .iter()
            .filter(|j| j.parked && !j.job.status.is_terminal())
            .map(|j| {
                let curve = &pt.curves[j.job.job_id as usize];
                let last_val = curve
                    .val_at_or_before(j.steps)
                    .map(|v| v.1)
                    .or_else(|| curve.ema_at(j.steps))
                    .expect("warmup ran at least one step");
                WarmupCandidate {
                    job_id: j.job.job_id,
                    last_val,
                }
            })
            .collect();
        let (kept, evicted) = warmup_select(&candidates, ratio);
        for id in evicted {
            let j = &mut t.jobs[id as usize];
            j.job
                .transition(ExitReason::Underperforming.status())
                .map_err(illegal)?;
            j.exit_step = Some(j.steps);
            j.parked = false;
        }
        let mut kept = kept;
        kept.sort_unstable();
        for &id in &kept {
            let j = &mut t.jobs[id as usize];
            j.job.transition(JobStatus::Training).map_err(illegal)?;
            j.parked = false;
            j.target = j.job.total_steps;
        }
        t.phase = Phase::Training;
        t.queue = kept;
        self.fill(i)
    }

    fn complete(&mut self, i: usize) -> Result<(), SimError> {
        let t = &mut self.tasks[i];
        t.end = Some(self.now);

        for k in &t.gpu_ids {
            self.gpu_busy[*k as usize] = None;
        }
        self.seq += 1;
        let seq = self.seq;
        if self.replan_pending != Some(self.now) {
            self.replan_pending = Some(self.now);
            self.heap.push(Reverse(Event {
                time: self.now,
                kind: EventKind::Replan,
                task: i as u32,
                job: 1,
                seq,
            }));
        }
        Ok(())
    }

    fn report(self) -> Result<SimReport, SimError> {
        let mut per_job = Vec::new();
        let mut tasks = Vec::new();
        let mut gantt = Vec::new();
        let mut saved = SamplesSaved::default();
        let (mut total, mut trained) = (0u64, 0u64);
        for (i, t) in self.tasks.iter().enumerate() {
            let pt = &self.p.tasks[t.idx];
            let (start, end) = match (t.start, t.end) {
                (Some(s), Some(e)) => (s, e),
                _ => return Err(SimError::Invariant(format!("task {i} never finished"))),
            };
            let mut task_total = 0;
            let mut task_trained = 0;
            let mut best: Option<(u32, f64)> = None;
            for j in &t.jobs {
                let b = u64::from(j.job.params.per_adapter_batch_size);
                let sched = j.job.scheduled_samples();
                let done = j.steps * b;
                let status = j.job.status;
                let saved_here = match status {
                    JobStatus::Completed => 0,
                    JobStatus::ExitedDiverging => (j.job.total_steps - j.steps) * b,
                    JobStatus::ExitedOverfitting => (j.job.total_steps - j.steps) * b,
                    JobStatus::ExitedUnderperforming => (j.job.total_steps - j.steps) * b,
                    other => {
                        return Err(SimError::Invariant(format!(
                            "task {i} job {} ended in state {other:?}",
                            j.job.job_id
                        )))
                    }
                };
                if done + saved_here != sched {
                    return Err(SimError::Invariant(format!(
                        "sample conservation broken for job {}",
                        j.job.job_id
                    )));
                }
                let reason = match status {
                    JobStatus::ExitedDiverging => Some(ExitReason::Diverging),
                    JobStatus::ExitedOverfitting => Some(ExitReason::Overfitting),
                    JobStatus::ExitedUnderperforming => Some(ExitReason::Underperforming),
                    _ => None,
                };
                if let Some(r) = reason {
                    saved.add(r, saved_here);
                }
                if matches!(status, JobStatus::Completed | JobStatus::ExitedOverfitting) {
                    if let Some((_, v)) = j.job.best_val {
                        if best.is_none_or(|(_, bv)| v < bv) {
                            best = Some((j.job.job_id, v));
                        }
                    }
                }
                task_total += sched;
                task_trained += done;
                per_job.push(JobOutcome {
                    task_id: pt.spec.task_id,
                    job_id: j.job.job_id,
                    status,
                    best_val: j.job.best_val,
                    exit_step: j.exit_step,
                    steps_trained: j.steps,
                    samples_trained: done,
                    samples_scheduled: sched,
                });
            }
            total += task_total;
            trained += task_trained;
            let loss_ratio = best.map(|(_, v)| v / pt.reference_best_val);
            let planted_best_completed = pt
                .planted_best
                .is_some_and(|b| t.jobs[b as usize].job.status == JobStatus::Completed);
            tasks.push(TaskOutcome {
                task_id: pt.spec.task_id,
                gpus: pt.spec.gpu_requirement,
                start: to_secs(start),
                end: to_secs(end),
                duration_estimate: t.estimate,
                throughput: t.throughput,
                best_job: best.map(|b| b.0),
                best_val: best.map(|b| b.1),
                reference_best_val: pt.reference_best_val,
                loss_ratio,
                planted_best: pt.planted_best,
                planted_best_completed,
                samples_total: task_total,
                samples_trained: task_trained,
            });
            let mut ids = t.gpu_ids.clone();
            ids.sort_unstable();
            gantt.push(GanttRecord {
                task_id: pt.spec.task_id,
                gpu_ids: ids,
                start: to_secs(start),
                end: to_secs(end),
            });
        }
        if trained + saved.total() != total {
            return Err(SimError::Invariant(
                "samples_trained + samples_saved != samples_total".into(),
            ));
        }
        let makespan = gantt.iter().map(|g| g.end).fold(0.0, f64::max);
        let loss_ratio = tasks
            .iter()
            .filter_map(|t| t.loss_ratio)
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
        let mut report = SimReport {
            flags: self.flags,
            seed: self.p.seed,
            makespan,
            samples_total: total,
            samples_trained: trained,
            samples_saved: saved,
            loss_ratio,
            tasks,
            per_job,
            gantt: Vec::new(),
            admissions: self.admissions,
            max_rank_batch: self.max_rank_batch,
            replans: self.replans,
            plans_optimal: self.plans_optimal,
        };
        report.gantt = gantt;
        report.gantt = emit_gantt(&report);
        Ok(report)
    }
}
