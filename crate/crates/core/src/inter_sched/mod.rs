//! Cluster-level placement of rigid multi-GPU tasks to minimise makespan
//! (`P|size_j|C_max`).
//!
//! Every task holds `g_i` GPUs for `d_i` seconds without preemption; two tasks
//! sharing a GPU must not overlap in time. The exact solver searches start
//! times chronologically: some optimal schedule starts every task at time 0 or
//! at another task's completion, so branching happens only at those events.
//! Because GPU ids need not be contiguous, a schedule that respects the
//! cumulative capacity at every instant always admits a concrete GPU
//! assignment; ids are handed out first-fit once start times are fixed.

pub mod oracle;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Internal time unit: integer microseconds.
pub type Micros = u64;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("throughput must be > 0, got {0}")]
    BadThroughput(f64),
    #[error("task {task_id} needs {gpus} GPUs but the cluster has {total}")]
    TooWide { task_id: u32, gpus: u32, total: u32 },
    #[error("task {0} has a non-positive or non-finite duration")]
    BadDuration(u32),
    #[error("task {0} requests zero GPUs")]
    NoGpus(u32),
    #[error("duplicate task id {0}")]
    DuplicateTask(u32),
    #[error("pinned task {task_id} uses GPU {gpu} which is out of range or already pinned")]
    PinConflict { task_id: u32, gpu: u32 },
    #[error("instance has {n} tasks; the brute-force oracle is limited to {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("plan violates {0}")]
    Infeasible(String),
}

pub fn to_micros(secs: f64) -> Micros {
    let v = secs * 1e6;
    let r = v.round();
    if (v - r).abs() <= 1e-6 * r.max(1.0) {
        r as Micros
    } else {
        v.ceil() as Micros
    }
}

pub fn to_secs(us: Micros) -> f64 {
    us as f64 / 1e6
}

/// `d_i = total_samples / throughput`.
pub fn estimate_duration(total_samples: u64, throughput: f64) -> Result<f64, SchedError> {
    if !(throughput > 0.0 && throughput.is_finite()) {
        return Err(SchedError::BadThroughput(throughput));
    }
    Ok(total_samples as f64 / throughput)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedTask {
    pub task_id: u32,
    /// Seconds.
    pub duration: f64,
    pub gpus: u32,
}

/// A task already running: fixed GPUs, occupying them from time 0 for `remaining` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedTask {
    pub task_id: u32,
    pub gpu_ids: Vec<u32>,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedInstance {
    pub tasks: Vec<SchedTask>,
    pub gpus: u32,
    #[serde(default)]
    pub pinned: Vec<PinnedTask>,
}

impl SchedInstance {
    pub fn new(tasks: Vec<SchedTask>, gpus: u32) -> Self {
        Self {
            tasks,
            gpus,
            pinned: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task_id) {
                return Err(SchedError::DuplicateTask(t.task_id));
            }
            if t.gpus == 0 {
                return Err(SchedError::NoGpus(t.task_id));
            }
            if t.gpus > self.gpus {
                return Err(SchedError::TooWide {
                    task_id: t.task_id,
                    gpus: t.gpus,
                    total: self.gpus,
                });
            }
            if !(t.duration.is_finite() && t.duration > 0.0) {
                return Err(SchedError::BadDuration(t.task_id));
            }
        }
        let mut used = vec![false; self.gpus as usize];
        for p in &self.pinned {
            if !seen.insert(p.task_id) {
                return Err(SchedError::DuplicateTask(p.task_id));
            }
            if p.gpu_ids.is_empty() {
                return Err(SchedError::NoGpus(p.task_id));
            }
            if !(p.remaining.is_finite() && p.remaining >= 0.0) {
                return Err(SchedError::BadDuration(p.task_id));
            }
            for &g in &p.gpu_ids {
                if g >= self.gpus || used[g as usize] {
                    return Err(SchedError::PinConflict {
                        task_id: p.task_id,
                        gpu: g,
                    });
                }
                used[g as usize] = true;
            }
        }
        Ok(())
    }

    /// `max(max_i d_i, total GPU-seconds / G)`, including pinned remainders.
    pub fn lower_bound(&self) -> f64 {
        let longest = self
            .tasks
            .iter()
            .map(|t| t.duration)
            .chain(self.pinned.iter().map(|p| p.remaining))
            .fold(0.0, f64::max);
        let area: f64 = self
            .tasks
            .iter()
            .map(|t| t.duration * f64::from(t.gpus))
            .sum::<f64>()
            + self
                .pinned
                .iter()
                .map(|p| p.remaining * p.gpu_ids.len() as f64)
                .sum::<f64>();
        longest.max(area / f64::from(self.gpus.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: u32,
    pub start: f64,
    pub end: f64,
    pub gpu_ids: Vec<u32>,
    #[serde(default)]
    pub pinned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    /// Sorted by task id.
    pub assignments: Vec<Assignment>,
    pub makespan: f64,
    pub optimal: bool,
}

impl SchedulePlan {
    pub fn get(&self, task_id: u32) -> Option<&Assignment> {
        self.assignments.iter().find(|a| a.task_id == task_id)
    }

    /// Writes `task_id,start,end,gpu_ids` rows, GPU ids joined by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,start,end,gpu_ids\n");
        for a in &self.assignments {
            let ids: Vec<String> = a.gpu_ids.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.task_id,
                crate::fmt_f64(a.start),
                crate::fmt_f64(a.end),
                ids.join(";")
            ));
        }
        out
    }
}

/// Checks per-GPU interval disjointness and instantaneous capacity separately,
/// plus GPU counts and the makespan value.
pub fn check_plan(
    plan: &SchedulePlan,
    gpus: u32,
    requirements: &[(u32, u32)],
) -> Result<(), SchedError> {
    let fail = |m: String| Err(SchedError::Infeasible(m));
    for &(task_id, g) in requirements {
        match plan.get(task_id) {
            None => return fail(format!("task {task_id} missing")),
            Some(a) if a.gpu_ids.len() != g as usize => {
                return fail(format!(
                    "task {task_id} holds {} GPUs, needs {g}",
                    a.gpu_ids.len()
                ))
            }
            Some(_) => {}
        }
    }
    for a in &plan.assignments {
        let mut ids = a.gpu_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != a.gpu_ids.len() || ids.iter().any(|&g| g >= gpus) {
            return fail(format!(
                "task {} has invalid GPU ids {:?}",
                a.task_id, a.gpu_ids
            ));
        }
        if a.end < a.start {
            return fail(format!("task {} ends before it starts", a.task_id));
        }
    }
    // Per-GPU disjointness.
    for g in 0..gpus {
        let mut iv: Vec<(f64, f64, u32)> = plan
            .assignments
            .iter()
            .filter(|a| a.gpu_ids.contains(&g) && a.end > a.start)
            .map(|a| (a.start, a.end, a.task_id))
            .collect();
        iv.sort_by(|x, y| x.0.total_cmp(&y.0));
        if let Some(w) = iv.windows(2).find(|w| w[1].0 < w[0].1) {
            return fail(format!("GPU {g} shared by tasks {} and {}", w[0].2, w[1].2));
        }
    }
    // Capacity at every start instant.
    for a in &plan.assignments {
        let used: usize = plan
            .assignments
            .iter()
            .filter(|b| b.start <= a.start && a.start < b.end)
            .map(|b| b.gpu_ids.len())
            .sum();
        if used > gpus as usize {
            return fail(format!(
                "{used} GPUs busy at t={} (capacity {gpus})",
                a.start
            ));
        }
    }
    let cmax = plan.assignments.iter().map(|a| a.end).fold(0.0, f64::max);
    if (cmax - plan.makespan).abs() > 1e-9 * cmax.max(1.0) {
        return fail(format!("makespan {} but last end {cmax}", plan.makespan));
    }
    Ok(())
}

/// Internal integer view of an instance.
#[derive(Debug, Clone)]
struct Problem {
    ids: Vec<u32>,
    dur: Vec<Micros>,
    gpus: Vec<u32>,
    total: u32,
    pinned: Vec<(Micros, u32)>,
    /// For each task, the nearest lower-index task with identical (d, g).
    twin: Vec<Option<usize>>,
}

impl Problem {
    fn new(inst: &SchedInstance) -> Self {
        let mut tasks = inst.tasks.clone();
        tasks.sort_by_key(|t| t.task_id);
        let dur: Vec<Micros> = tasks.iter().map(|t| to_micros(t.duration)).collect();
        let gpus: Vec<u32> = tasks.iter().map(|t| t.gpus).collect();
        let twin = (0..tasks.len())
            .map(|i| {
                (0..i)
                    .rev()
                    .find(|&j| dur[j] == dur[i] && gpus[j] == gpus[i])
            })
            .collect();
        Self {
            ids: tasks.iter().map(|t| t.task_id).collect(),
            dur,
            gpus,
            total: inst.gpus,
            pinned: inst
                .pinned
                .iter()
                .map(|p| (to_micros(p.remaining), p.gpu_ids.len() as u32))
                .collect(),
            twin,
        }
    }

    fn n(&self) -> usize {
        self.ids.len()
    }
}

/// Builds a plan from integer start times, assigning GPUs first-fit in
/// start order. Completions at an instant release GPUs before starts claim them.
fn materialize(
    inst: &SchedInstance,
    ids: &[u32],
    dur: &[Micros],
    gpus: &[u32],
    starts: &[Micros],
    optimal: bool,
) -> SchedulePlan {
    let total = inst.gpus as usize;
    let mut busy_until: Vec<Micros> = vec![0; total];
    let mut assignments = Vec::with_capacity(ids.len() + inst.pinned.len());
    for p in &inst.pinned {
        let end = to_micros(p.remaining);
        for &g in &p.gpu_ids {
            busy_until[g as usize] = end;
        }
        let mut gpu_ids = p.gpu_ids.clone();
        gpu_ids.sort_unstable();
        assignments.push(Assignment {
            task_id: p.task_id,
            start: 0.0,
            end: to_secs(end),
            gpu_ids,
            pinned: true,
        });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (starts[i], i));
    for i in order {
        let s = starts[i];
        let mut got = Vec::with_capacity(gpus[i] as usize);
        for (g, until) in busy_until.iter_mut().enumerate() {
            if got.len() == gpus[i] as usize {
                break;
            }
            if *until <= s {
                *until = s + dur[i];
                got.push(g as u32);
            }
        }
        assert_eq!(
            got.len(),
            gpus[i] as usize,
            "capacity-feasible schedule must admit GPU ids"
        );
        assignments.push(Assignment {
            task_id: ids[i],
            start: to_secs(s),
            end: to_secs(s + dur[i]),
            gpu_ids: got,
            pinned: false,
        });
    }
    assignments.sort_by_key(|a| a.task_id);
    let makespan = assignments.iter().map(|a| a.end).fold(0.0, f64::max);
    SchedulePlan {
        assignments,
        makespan,
        optimal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverConfig {
    /// Wall-clock cap; when hit the incumbent is returned with `optimal = false`.
    pub time_limit: Option<Duration>,
    /// Deterministic cap on search nodes.
    pub node_limit: Option<u64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            time_limit: Some(Duration::from_secs(1)),
            node_limit: None,
        }
    }
}

impl SolverConfig {
    pub fn unlimited() -> Self {
        Self {
            time_limit: None,
            node_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveStats {
    pub nodes: u64,
    pub shift_prunes: u64,
}

struct Search<'a> {
    p: &'a Problem,
    cfg: SolverConfig,
    started: Instant,
    stats: SolveStats,
    aborted: bool,
    best_c: Micros,
    best_starts: Vec<Micros>,
    /// Phase 2 only: makespan that must not be exceeded.
    cap: Option<Micros>,
}

#[derive(Clone)]
struct Node {
    t: Micros,
    /// (end, gpus) of tasks in progress at `t`.
    running: Vec<(Micros, u32)>,
    unscheduled: u64,
    starts: Vec<Option<Micros>>,
    /// (start, end, gpus) of everything started so far, pinned tasks included.
    placed: Vec<(Micros, Micros, u32)>,
    /// Earlier decision instants.
    history: Vec<Micros>,
}

impl Node {
    fn free(&self, total: u32) -> u32 {
        total - self.running.iter().map(|r| r.1).sum::<u32>()
    }
}

impl<'a> Search<'a> {
    fn tick(&mut self) -> bool {
        self.stats.nodes += 1;
        if let Some(limit) = self.cfg.node_limit {
            if self.stats.nodes > limit {
                self.aborted = true;
            }
        }
        if self.stats.nodes.is_multiple_of(1024) {
            if let Some(tl) = self.cfg.time_limit {
                if self.started.elapsed() > tl {
                    self.aborted = true;
                }
            }
        }
        self.aborted
    }

    fn lower_bound(&self, node: &Node) -> Micros {
        let p = self.p;
        let t = node.t;
        let free = node.free(p.total);
        let next_end = node.running.iter().map(|r| r.0).min().unwrap_or(t);
        let mut lb = node.running.iter().map(|r| r.0).max().unwrap_or(t).max(t);
        let mut area: u128 = node
            .running
            .iter()
            .map(|&(e, g)| u128::from(e - t) * u128::from(g))
            .sum();
        let half = p.total / 2;
        let mut wide_sum = 0;
        let mut wide_after = node
            .running
            .iter()
            .filter(|r| r.1 > half)
            .map(|r| r.0)
            .max()
            .unwrap_or(t);
        for i in 0..p.n() {
            if node.unscheduled & (1 << i) == 0 {
                continue;
            }
            let earliest = if p.gpus[i] <= free { t } else { next_end };
            lb = lb.max(earliest + p.dur[i]);
            area += u128::from(p.dur[i]) * u128::from(p.gpus[i]);
            if p.gpus[i] > half {
                wide_sum += p.dur[i];
                if p.gpus[i] > free {
                    wide_after = wide_after.max(next_end);
                }
            }
        }
        let total = u128::from(p.total);
        lb = lb.max(t + area.div_ceil(total) as Micros);
        lb.max(wide_after + wide_sum)
    }

    /// Starting task `i` now is dominated if it already fits at an earlier
    /// decision instant given everything started so far: moving it there keeps
    /// the schedule feasible (later starts only gain room) and lowers its start.
    fn left_shiftable(&self, node: &Node, i: usize) -> bool {
        node.history.iter().any(|&te| {
            fits_interval(
                &node.placed,
                te,
                self.p.dur[i],
                self.p.gpus[i],
                self.p.total,
            )
        })
    }

    /// Whether a completion of `node` could beat the incumbent lexicographically
    /// on start times (makespan already tied).
    fn lex_may_improve(&self, node: &Node) -> bool {
        for i in 0..self.p.n() {
            let inc = self.best_starts[i];
            match node.starts[i] {
                Some(s) if s < inc => return true,
                Some(s) if s > inc => return false,
                Some(_) => continue,
                None if node.t > inc => return false,
                None if node.t < inc => return true,
                None => continue,
            }
        }
        false
    }

    fn record(&mut self, node: &Node) {
        let c = node
            .running
            .iter()
            .map(|r| r.0)
            .max()
            .unwrap_or(node.t)
            .max(node.t);
        let starts: Vec<Micros> = node.starts.iter().map(|s| s.expect("complete")).collect();
        let better = match self.cap {
            None => c < self.best_c,
            Some(cap) => c <= cap && starts < self.best_starts,
        };
        if better {
            self.best_c = c;
            self.best_starts = starts;
        }
    }

    /// Explores decisions at time `node.t`. Tasks started at one instant are
    /// chosen in increasing index order, so each start set is visited once.
    fn dfs(&mut self, node: &mut Node, from: usize) {
        if self.tick() {
            return;
        }
        if node.unscheduled == 0 {
            self.record(node);
            return;
        }
        let lb = self.lower_bound(node);
        let pruned = match self.cap {
            None => lb >= self.best_c,
            Some(cap) => lb > cap || !self.lex_may_improve(node),
        };
        if pruned {
            return;
        }

        let free = node.free(self.p.total);
        for i in from..self.p.n() {
            let bit = 1u64 << i;
            if node.unscheduled & bit == 0 || self.p.gpus[i] > free {
                continue;
            }
            // Identical tasks start in id order.
            if let Some(tw) = self.p.twin[i] {
                if node.unscheduled & (1 << tw) != 0 {
                    continue;
                }
            }
            if self.left_shiftable(node, i) {
                self.stats.shift_prunes += 1;
                continue;
            }
            let end = node.t + self.p.dur[i];
            node.unscheduled &= !bit;
            node.starts[i] = Some(node.t);
            node.running.push((end, self.p.gpus[i]));
            node.placed.push((node.t, end, self.p.gpus[i]));
            self.dfs(node, i + 1);
            node.placed.pop();
            node.running.pop();
            node.starts[i] = None;
            node.unscheduled |= bit;
            if self.aborted {
                return;
            }
        }

        // Let time advance to the next completion without starting anything more now.
        if let Some(next) = node
            .running
            .iter()
            .map(|r| r.0)
            .filter(|&e| e > node.t)
            .min()
        {
            let mut child = Node {
                t: next,
                running: node
                    .running
                    .iter()
                    .copied()
                    .filter(|r| r.0 > next)
                    .collect(),
                unscheduled: node.unscheduled,
                starts: node.starts.clone(),
                placed: node.placed.clone(),
                history: node
                    .history
                    .iter()
                    .copied()
                    .chain(std::iter::once(node.t))
                    .collect(),
            };
            self.dfs(&mut child, 0);
        }
    }
}

/// Greedy list schedule in the given priority order: each task starts at the
/// earliest completion-aligned time where its GPUs are free for its whole
/// duration. Used for incumbents and for the SJF baseline.
fn list_schedule(p: &Problem, order: &[usize]) -> Vec<Micros> {
    let mut placed: Vec<(Micros, Micros, u32)> = p.pinned.iter().map(|&(e, g)| (0, e, g)).collect();
    let mut starts = vec![0; p.n()];
    for &i in order {
        let (d, g) = (p.dur[i], p.gpus[i]);
        let mut candidates: Vec<Micros> = std::iter::once(0)
            .chain(placed.iter().map(|x| x.1))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let s = candidates
            .into_iter()
            .find(|&s| fits_interval(&placed, s, d, g, p.total))
            .expect("serial placement after all tasks always fits");
        placed.push((s, s + d, g));
        starts[i] = s;
    }
    starts
}

/// Whether `g` more GPUs are available throughout `[s, s + d)`.
fn fits_interval(
    placed: &[(Micros, Micros, u32)],
    s: Micros,
    d: Micros,
    g: u32,
    total: u32,
) -> bool {
    let end = s + d;
    let usage_at = |t: Micros| -> u32 {
        placed
            .iter()
            .filter(|x| x.0 <= t && t < x.1)
            .map(|x| x.2)
            .sum()
    };
    if usage_at(s) + g > total {
        return false;
    }
    placed
        .iter()
        .filter(|x| x.0 > s && x.0 < end)
        .all(|x| usage_at(x.0) + g <= total)
}

fn makespan_of(p: &Problem, starts: &[Micros]) -> Micros {
    let pinned = p.pinned.iter().map(|x| x.0).max().unwrap_or(0);
    (0..p.n())
        .map(|i| starts[i] + p.dur[i])
        .max()
        .unwrap_or(0)
        .max(pinned)
}

/// Exact makespan minimisation; among optimal plans returns the one with the
/// lexicographically smallest start vector (ordered by task id), GPUs first-fit.
pub fn solve_exact(inst: &SchedInstance) -> Result<SchedulePlan, SchedError> {
    solve_exact_with(inst, SolverConfig::default()).map(|(plan, _)| plan)
}

pub fn solve_exact_with(
    inst: &SchedInstance,
    cfg: SolverConfig,
) -> Result<(SchedulePlan, SolveStats), SchedError> {
    inst.validate()?;
    let p = Problem::new(inst);
    assert!(p.n() <= 64, "solver supports at most 64 free tasks");
    if p.n() == 0 {
        return Ok((
            materialize(inst, &p.ids, &p.dur, &p.gpus, &[], true),
            SolveStats::default(),
        ));
    }

    // Incumbent: best of a few list schedules.
    let mut orders: Vec<Vec<usize>> = vec![(0..p.n()).collect()];
    let mut by_area: Vec<usize> = (0..p.n()).collect();
    by_area.sort_by_key(|&i| (std::cmp::Reverse(p.dur[i] * u64::from(p.gpus[i])), i));
    orders.push(by_area);
    let mut by_len: Vec<usize> = (0..p.n()).collect();
    by_len.sort_by_key(|&i| (std::cmp::Reverse(p.dur[i]), i));
    orders.push(by_len);
    let (mut best_c, mut best_starts) = (Micros::MAX, Vec::new());
    for o in &orders {
        let s = list_schedule(&p, o);
        let c = makespan_of(&p, &s);
        if c < best_c || (c == best_c && s < best_starts) {
            best_c = c;
            best_starts = s;
        }
    }

    let root = Node {
        t: 0,
        running: p.pinned.clone(),
        unscheduled: if p.n() == 64 {
            u64::MAX
        } else {
            (1u64 << p.n()) - 1
        },
        starts: vec![None; p.n()],
        placed: p.pinned.iter().map(|&(e, g)| (0, e, g)).collect(),
        history: Vec::new(),
    };
    let mut search = Search {
        p: &p,
        cfg,
        started: Instant::now(),
        stats: SolveStats::default(),
        aborted: false,
        best_c,
        best_starts,
        cap: None,
    };
    // Phase 1: optimal makespan. Phase 2: lexicographically smallest starts at that makespan.
    search.dfs(&mut root.clone(), 0);
    if !search.aborted {
        search.cap = Some(search.best_c);
        search.dfs(&mut root.clone(), 0);
    }
    let optimal = !search.aborted;
    let plan = materialize(inst, &p.ids, &p.dur, &p.gpus, &search.best_starts, optimal);
    Ok((plan, search.stats))
}

/// Shortest-job-first list scheduling (ties by task id).
pub fn solve_sjf(inst: &SchedInstance) -> Result<SchedulePlan, SchedError> {
    inst.validate()?;
    let p = Problem::new(inst);
    let mut order: Vec<usize> = (0..p.n()).collect();
    order.sort_by_key(|&i| (p.dur[i], p.ids[i]));
    let starts = list_schedule(&p, &order);
    Ok(materialize(inst, &p.ids, &p.dur, &p.gpus, &starts, false))
}

/// Builds a plan from explicit start times (seconds), GPUs first-fit.
pub fn plan_from_starts(
    inst: &SchedInstance,
    starts: &[(u32, f64)],
) -> Result<SchedulePlan, SchedError> {
    inst.validate()?;
    let p = Problem::new(inst);
    let s: Vec<Micros> = p
        .ids
        .iter()
        .map(|id| {
            starts
                .iter()
                .find(|x| x.0 == *id)
                .map(|x| to_micros(x.1))
                .ok_or_else(|| SchedError::Infeasible(format!("no start for task {id}")))
        })
        .collect::<Result<_, _>>()?;
    let mut placed: Vec<(Micros, Micros, u32)> = p.pinned.iter().map(|&(e, g)| (0, e, g)).collect();
    let mut order: Vec<usize> = (0..p.n()).collect();
    order.sort_by_key(|&i| s[i]);
    for i in order {
        if !fits_interval(&placed, s[i], p.dur[i], p.gpus[i], p.total) {
            return Err(SchedError::Infeasible(format!(
                "capacity exceeded by task {}",
                p.ids[i]
            )));
        }
        placed.push((s[i], s[i] + p.dur[i], p.gpus[i]));
    }
    Ok(materialize(inst, &p.ids, &p.dur, &p.gpus, &s, false))
}

/// A task currently executing on the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningTask {
    pub task_id: u32,
    pub gpu_ids: Vec<u32>,
    /// Absolute start time (seconds).
    pub start: f64,
    /// Re-estimated seconds left, as of `ClusterState::now`.
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub now: f64,
    pub gpus: u32,
    pub running: Vec<RunningTask>,
    pub queued: Vec<SchedTask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ReplanEvent {
    TaskArrival { task_id: u32 },
    TaskCompletion { task_id: u32 },
}

/// Re-solves placement with running tasks pinned to their GPUs.
///
/// Times in the returned plan are absolute; pinned tasks keep their original
/// start and GPU set.
pub fn replan(
    state: &ClusterState,
    _event: ReplanEvent,
    cfg: SolverConfig,
) -> Result<SchedulePlan, SchedError> {
    let inst = SchedInstance {
        tasks: state.queued.clone(),
        gpus: state.gpus,
        pinned: state
            .running
            .iter()
            .map(|r| PinnedTask {
                task_id: r.task_id,
                gpu_ids: r.gpu_ids.clone(),
                remaining: r.remaining.max(0.0),
            })
            .collect(),
    };
    let (mut plan, _) = solve_exact_with(&inst, cfg)?;
    let now = state.now;
    for a in &mut plan.assignments {
        if a.pinned {
            let r = state
                .running
                .iter()
                .find(|r| r.task_id == a.task_id)
                .expect("pinned task");
            a.start = r.start;
        } else {
            a.start += now;
        }
        a.end += now;
    }
    plan.makespan = plan.assignments.iter().map(|a| a.end).fold(now, f64::max);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(tasks: &[(f64, u32)], gpus: u32) -> SchedInstance {
        SchedInstance::new(
            tasks
                .iter()
                .enumerate()
                .map(|(i, &(d, g))| SchedTask {
                    task_id: i as u32,
                    duration: d,
                    gpus: g,
                })
                .collect(),
            gpus,
        )
    }

    fn reqs(i: &SchedInstance) -> Vec<(u32, u32)> {
        i.tasks.iter().map(|t| (t.task_id, t.gpus)).collect()
    }

    #[test]
    fn duration_estimates() {
        assert_eq!(estimate_duration(1000, 10.0).unwrap(), 100.0);
        assert_eq!(estimate_duration(0, 10.0).unwrap(), 0.0);
        assert_eq!(
            estimate_duration(5, 0.0),
            Err(SchedError::BadThroughput(0.0))
        );
    }

    #[test]
    fn micros_rounding() {
        assert_eq!(to_micros(0.1), 100_000);
        assert_eq!(to_micros(2.0), 2_000_000);
        assert_eq!(to_micros(1e-7), 1);
    }

    #[test]
    fn single_task() {
        let i = inst(&[(5.0, 2)], 4);
        let p = solve_exact(&i).unwrap();
        assert_eq!(p.makespan, 5.0);
        assert_eq!(p.assignments[0].start, 0.0);
        assert_eq!(p.assignments[0].gpu_ids, vec![0, 1]);
        assert!(p.optimal);
    }

    #[test]
    fn full_width_serializes() {
        let i = inst(&[(3.0, 4), (2.0, 4)], 4);
        let p = solve_exact(&i).unwrap();
        assert_eq!(p.makespan, 5.0);
        assert_eq!(p.assignments[0].start, 0.0);
        check_plan(&p, 4, &reqs(&i)).unwrap();
        assert_eq!(solve_sjf(&i).unwrap().makespan, 5.0);
    }

    #[test]
    fn full_parallelism() {
        let i = inst(&[(7.0, 1); 4], 4);
        let p = solve_exact(&i).unwrap();
        assert_eq!(p.makespan, 7.0);
        assert!(p.assignments.iter().all(|a| a.start == 0.0));
        let ids: Vec<_> = p.assignments.iter().map(|a| a.gpu_ids[0]).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_instance() {
        let i = inst(&[], 4);
        assert_eq!(solve_sjf(&i).unwrap().makespan, 0.0);
        assert_eq!(solve_exact(&i).unwrap().makespan, 0.0);
    }

    #[test]
    fn rejects_too_wide() {
        let i = inst(&[(1.0, 5)], 4);
        assert!(matches!(solve_exact(&i), Err(SchedError::TooWide { .. })));
    }

    #[test]
    fn rejects_overlapping_pins() {
        let mut i = inst(&[(1.0, 1)], 4);
        i.pinned = vec![
            PinnedTask {
                task_id: 10,
                gpu_ids: vec![0, 1],
                remaining: 2.0,
            },
            PinnedTask {
                task_id: 11,
                gpu_ids: vec![1],
                remaining: 2.0,
            },
        ];
        assert!(matches!(
            solve_exact(&i),
            Err(SchedError::PinConflict {
                task_id: 11,
                gpu: 1
            })
        ));
    }

    #[test]
    fn pinned_tasks_keep_gpus() {
        let mut i = inst(&[(2.0, 2), (1.0, 1)], 4);
        i.pinned = vec![PinnedTask {
            task_id: 9,
            gpu_ids: vec![1, 3],
            remaining: 4.0,
        }];
        let p = solve_exact(&i).unwrap();
        let pin = p.get(9).unwrap();
        assert_eq!((pin.start, pin.gpu_ids.clone()), (0.0, vec![1, 3]));
        assert_eq!(p.get(0).unwrap().gpu_ids, vec![0, 2]);
        assert_eq!(p.makespan, 4.0);
        let mut r = reqs(&i);
        r.push((9, 2));
        check_plan(&p, 4, &r).unwrap();
    }

    #[test]
    fn lexicographic_canonical_plan() {
        // Tasks 0 and 2 are interchangeable in an optimal plan; lex-min starts 0 first.
        let i = inst(&[(2.0, 1), (3.0, 3), (2.0, 1)], 4);
        let p = solve_exact(&i).unwrap();
        assert_eq!(p.makespan, 4.0);
        let starts: Vec<f64> = p.assignments.iter().map(|a| a.start).collect();
        assert_eq!(starts, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn replan_empty_queue_keeps_pins() {
        let st = ClusterState {
            now: 10.0,
            gpus: 4,
            running: vec![RunningTask {
                task_id: 1,
                gpu_ids: vec![0, 1],
                start: 3.0,
                remaining: 5.0,
            }],
            queued: vec![],
        };
        let p = replan(
            &st,
            ReplanEvent::TaskCompletion { task_id: 0 },
            SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(p.assignments.len(), 1);
        assert_eq!(p.assignments[0].start, 3.0);
        assert_eq!(p.assignments[0].end, 15.0);
        assert_eq!(p.makespan, 15.0);
    }

    #[test]
    fn replan_backfills_immediately() {
        let st = ClusterState {
            now: 20.0,
            gpus: 4,
            running: vec![],
            queued: vec![SchedTask {
                task_id: 4,
                duration: 6.0,
                gpus: 4,
            }],
        };
        let p = replan(
            &st,
            ReplanEvent::TaskCompletion { task_id: 2 },
            SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(p.get(4).unwrap().start, 20.0);
    }

    #[test]
    fn csv_format() {
        let i = inst(&[(5.0, 2)], 4);
        let csv = solve_exact(&i).unwrap().to_csv();
        assert_eq!(csv, "task_id,start,end,gpu_ids\n0,0.0,5.0,0;1\n");
    }
}
