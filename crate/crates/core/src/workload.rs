//! Domain types for tuning workloads: hyperparameter grids, jobs, tasks and
//! loss trajectories, plus a synthetic curve generator and CSV trace ingestion.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::early_exit::{ema_update, DEFAULT_ALPHA};

pub type Step = u64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("search-space axis `{0}` is empty")]
    EmptyAxis(&'static str),
    #[error("invalid value on axis `{axis}`: {value}")]
    InvalidAxisValue { axis: &'static str, value: String },
    #[error("invalid curve profile: {0}")]
    InvalidProfile(String),
    #[error("total_steps and eval_interval must be >= 1")]
    InvalidLength,
    #[error("duplicate step {0} in trace")]
    DuplicateStep(Step),
    #[error("non-finite or negative {column} value {value} at step {step}")]
    BadLoss {
        step: Step,
        column: &'static str,
        value: f64,
    },
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error("illegal status transition {from:?} -> {to:?} for job {job_id}")]
    IllegalTransition {
        job_id: u32,
        from: JobStatus,
        to: JobStatus,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One point in the LoRA hyperparameter space.
///
/// The adapter scale follows the `alpha = 2r` convention, so `scale()` is
/// always 2 regardless of rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub lora_rank: u32,
    pub per_adapter_batch_size: u32,
}

impl HyperParams {
    pub fn alpha(&self) -> f64 {
        2.0 * f64::from(self.lora_rank)
    }

    pub fn scale(&self) -> f64 {
        self.alpha() / f64::from(self.lora_rank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobStatus {
    Pending,
    Warmup,
    Training,
    ExitedDiverging,
    ExitedOverfitting,
    ExitedUnderperforming,
    Completed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobStatus::ExitedDiverging
                | JobStatus::ExitedOverfitting
                | JobStatus::ExitedUnderperforming
                | JobStatus::Completed
        )
    }

    fn allows(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, next),
            (Pending, Warmup)
                | (Warmup, Training)
                | (Warmup, ExitedUnderperforming)
                | (Warmup, ExitedDiverging)
                | (Training, ExitedDiverging)
                | (Training, ExitedOverfitting)
                | (Training, Completed)
        )
    }
}

/// Step-indexed raw train loss, its EMA, and sparse validation loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub train: Vec<(Step, f64)>,
    pub train_ema: Vec<(Step, f64)>,
    pub val: Vec<(Step, f64)>,
}

impl LossTrajectory {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }

    pub fn last_step(&self) -> Option<Step> {
        let t = self.train.last().map(|p| p.0);
        let v = self.val.last().map(|p| p.0);
        t.max(v)
    }

    /// EMA value recorded at `step`, if any.
    pub fn ema_at(&self, step: Step) -> Option<f64> {
        self.train_ema
            .binary_search_by_key(&step, |p| p.0)
            .ok()
            .map(|i| self.train_ema[i].1)
    }

    /// Lowest validation loss and the step it occurred at; earliest step wins ties.
    pub fn best_val(&self) -> Option<(Step, f64)> {
        self.val.iter().copied().fold(None, |best, p| match best {
            Some((_, v)) if v <= p.1 => best,
            _ => Some(p),
        })
    }

    /// Last validation point at or before `step`.
    pub fn val_at_or_before(&self, step: Step) -> Option<(Step, f64)> {
        self.val.iter().copied().take_while(|p| p.0 <= step).last()
    }

    /// Writes the `step,train_loss,val_loss` CSV form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), WorkloadError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_loss", "val_loss"])?;
        let mut vals = self.val.iter().peekable();
        for &(step, loss) in &self.train {
            let val = match vals.peek() {
                Some(&&(s, v)) if s == step => {
                    vals.next();
                    crate::fmt_f64(v)
                }
                _ => String::new(),
            };
            w.write_record([step.to_string(), crate::fmt_f64(loss), val])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: u32,
    pub params: HyperParams,
    pub total_steps: Step,
    pub trajectory: LossTrajectory,
    pub status: JobStatus,
    pub best_val: Option<(Step, f64)>,
}

impl Job {
    pub fn new(job_id: u32, params: HyperParams, total_steps: Step) -> Self {
        Self {
            job_id,
            params,
            total_steps,
            trajectory: LossTrajectory::default(),
            status: JobStatus::Pending,
            best_val: None,
        }
    }

    pub fn scheduled_samples(&self) -> u64 {
        self.total_steps * u64::from(self.params.per_adapter_batch_size)
    }

    pub fn transition(&mut self, next: JobStatus) -> Result<(), WorkloadError> {
        if !self.status.allows(next) {
            return Err(WorkloadError::IllegalTransition {
                job_id: self.job_id,
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    pub fn record_val(&mut self, step: Step, loss: f64) {
        match self.best_val {
            Some((_, v)) if v <= loss => {}
            _ => self.best_val = Some((step, loss)),
        }
    }
}

/// A set of jobs sharing one base model and GPU requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u32,
    pub gpu_requirement: u32,
    pub jobs: Vec<Job>,
    pub total_samples: u64,
    pub throughput: Option<f64>,
    pub duration_estimate: Option<f64>,
    pub arrival_time: f64,
}

impl Task {
    /// Records a profiled throughput and derives the duration estimate from it.
    pub fn set_throughput(&mut self, samples_per_sec: f64) {
        self.throughput = Some(samples_per_sec);
        self.duration_estimate = Some(self.total_samples as f64 / samples_per_sec);
    }
}

/// Hyperparameter axes; expansion is the Cartesian product in (lr, rank, batch) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: Vec<f64>,
    pub rank: Vec<u32>,
    pub batch_size: Vec<u32>,
}

impl SearchSpace {
    pub fn size(&self) -> usize {
        self.lr.len() * self.rank.len() * self.batch_size.len()
    }
}

pub fn expand_search_space(
    grid: &SearchSpace,
    total_steps: Step,
) -> Result<Vec<Job>, WorkloadError> {
    if grid.lr.is_empty() {
        return Err(WorkloadError::EmptyAxis("lr"));
    }
    if grid.rank.is_empty() {
        return Err(WorkloadError::EmptyAxis("rank"));
    }
    if grid.batch_size.is_empty() {
        return Err(WorkloadError::EmptyAxis("batch_size"));
    }
    if let Some(bad) = grid.lr.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(WorkloadError::InvalidAxisValue {
            axis: "lr",
            value: bad.to_string(),
        });
    }
    if grid.rank.contains(&0) {
        return Err(WorkloadError::InvalidAxisValue {
            axis: "rank",
            value: "0".into(),
        });
    }
    if grid.batch_size.contains(&0) {
        return Err(WorkloadError::InvalidAxisValue {
            axis: "batch_size",
            value: "0".into(),
        });
    }

    let mut jobs = Vec::with_capacity(grid.size());
    for &learning_rate in &grid.lr {
        for &lora_rank in &grid.rank {
            for &per_adapter_batch_size in &grid.batch_size {
                let params = HyperParams {
                    learning_rate,
                    lora_rank,
                    per_adapter_batch_size,
                };
                jobs.push(Job::new(jobs.len() as u32, params, total_steps));
            }
        }
    }
    Ok(jobs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CurveKind {
    Converging,
    Diverging,
    Overfitting,
    Underperforming,
}

fn default_val_gap() -> f64 {
    0.02
}

/// Parametric loss curve.
///
/// Before `break_step` every kind follows `floor + (base - floor) * exp(-decay * t)`.
/// Diverging curves then rise linearly in both train and val; overfitting curves
/// keep decreasing in train while val rises linearly. Validation sits
/// `val_gap` above the clean train curve. Noise is Gaussian on log-loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveProfile {
    pub kind: CurveKind,
    pub base_level: f64,
    pub decay_rate: f64,
    #[serde(default)]
    pub break_step: Step,
    #[serde(default)]
    pub post_break_slope: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Log-noise on validation loss; `None` uses a quarter of `noise_sigma`.
    #[serde(default)]
    pub val_noise_sigma: Option<f64>,
    pub floor: f64,
    #[serde(default = "default_val_gap")]
    pub val_gap: f64,
}

impl CurveProfile {
    pub fn converging(base_level: f64, decay_rate: f64, floor: f64) -> Self {
        Self {
            kind: CurveKind::Converging,
            base_level,
            decay_rate,
            break_step: 0,
            post_break_slope: 0.0,
            noise_sigma: 0.0,
            val_noise_sigma: None,
            floor,
            val_gap: default_val_gap(),
        }
    }

    pub fn val_sigma(&self) -> f64 {
        self.val_noise_sigma.unwrap_or(self.noise_sigma / 4.0)
    }

    fn decayed(&self, step: f64) -> f64 {
        self.floor + (self.base_level - self.floor) * (-self.decay_rate * step).exp()
    }

    /// Noise-free train loss at `step`.
    pub fn clean_train(&self, step: Step) -> f64 {
        match self.kind {
            CurveKind::Diverging if step > self.break_step => {
                self.decayed(self.break_step as f64)
                    + self.post_break_slope * (step - self.break_step) as f64
            }
            _ => self.decayed(step as f64),
        }
    }

    /// Noise-free validation loss at `step`.
    pub fn clean_val(&self, step: Step) -> f64 {
        let scale = 1.0 + self.val_gap;
        match self.kind {
            CurveKind::Diverging | CurveKind::Overfitting if step > self.break_step => {
                self.decayed(self.break_step as f64) * scale
                    + self.post_break_slope * (step - self.break_step) as f64
            }
            _ => self.decayed(step as f64) * scale,
        }
    }

    pub fn validate(&self, total_steps: Step) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidProfile(m.to_string()));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if let Some(s) = self.val_noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("val_noise_sigma must be finite and >= 0");
            }
        }
        let finite = [
            self.base_level,
            self.decay_rate,
            self.post_break_slope,
            self.floor,
            self.val_gap,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("curve parameters must be finite");
        }
        if self.val_gap < 0.0 {
            return bad("val_gap must be >= 0");
        }
        if matches!(self.kind, CurveKind::Diverging | CurveKind::Overfitting)
            && self.break_step >= total_steps
        {
            return bad("break_step must precede total_steps");
        }
        Ok(())
    }
}

const MIN_LOSS: f64 = 1e-6;

fn noisy(clean: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let clean = clean.max(MIN_LOSS);
    if sigma == 0.0 {
        return clean;
    }
    let z: f64 = rng.sample(StandardNormal);
    (clean.ln() + sigma * z).exp().max(MIN_LOSS)
}

/// Synthesises a trajectory over steps `1..=total_steps`, with validation at
/// every multiple of `eval_interval`.
pub fn generate_trajectory(
    profile: &CurveProfile,
    total_steps: Step,
    eval_interval: Step,
    seed: u64,
) -> Result<LossTrajectory, WorkloadError> {
    generate_trajectory_with_alpha(profile, total_steps, eval_interval, seed, DEFAULT_ALPHA)
}

pub fn generate_trajectory_with_alpha(
    profile: &CurveProfile,
    total_steps: Step,
    eval_interval: Step,
    seed: u64,
    alpha: f64,
) -> Result<LossTrajectory, WorkloadError> {
    if total_steps == 0 || eval_interval == 0 {
        return Err(WorkloadError::InvalidLength);
    }
    profile.validate(total_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let val_sigma = profile.val_sigma();
    let n = total_steps as usize;
    let mut traj = LossTrajectory {
        train: Vec::with_capacity(n),
        train_ema: Vec::with_capacity(n),
        val: Vec::with_capacity(n / eval_interval as usize + 1),
    };
    let mut ema = None;
    for step in 1..=total_steps {
        let loss = noisy(profile.clean_train(step), profile.noise_sigma, &mut rng);
        let smoothed = ema_update(ema, loss, alpha).expect("alpha validated by caller");
        ema = Some(smoothed);
        traj.train.push((step, loss));
        traj.train_ema.push((step, smoothed));
        if step % eval_interval == 0 {
            traj.val
                .push((step, noisy(profile.clean_val(step), val_sigma, &mut rng)));
        }
    }
    Ok(traj)
}

/// One row of a loss-trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: Step,
    pub train_loss: f64,
    #[serde(default)]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestedTrace {
    pub trajectory: LossTrajectory,
    /// Set when input rows were not already in ascending step order.
    pub reordered: bool,
}

fn check_loss(step: Step, column: &'static str, value: f64) -> Result<(), WorkloadError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(WorkloadError::BadLoss {
            step,
            column,
            value,
        })
    }
}

pub fn ingest_trace(rows: &[TraceRow], alpha: f64) -> Result<IngestedTrace, WorkloadError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(WorkloadError::Malformed(format!(
            "EMA alpha {alpha} outside (0,1]"
        )));
    }
    for r in rows {
        check_loss(r.step, "train_loss", r.train_loss)?;
        if let Some(v) = r.val_loss {
            check_loss(r.step, "val_loss", v)?;
        }
    }
    let reordered = rows.windows(2).any(|w| w[0].step > w[1].step);
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.step);
    if let Some(w) = sorted.windows(2).find(|w| w[0].step == w[1].step) {
        return Err(WorkloadError::DuplicateStep(w[0].step));
    }

    let mut traj = LossTrajectory::default();
    let mut ema = None;
    for r in &sorted {
        let smoothed = ema_update(ema, r.train_loss, alpha).expect("alpha checked");
        ema = Some(smoothed);
        traj.train.push((r.step, r.train_loss));
        traj.train_ema.push((r.step, smoothed));
        if let Some(v) = r.val_loss {
            traj.val.push((r.step, v));
        }
    }
    Ok(IngestedTrace {
        trajectory: traj,
        reordered,
    })
}

/// Parses `step,train_loss,val_loss` CSV rows; an empty val cell means no evaluation.
pub fn read_trace_rows<R: Read>(input: R) -> Result<Vec<TraceRow>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(step_col), Some(train_col)) = (col("step"), col("train_loss")) else {
        return Err(WorkloadError::Malformed(
            "header must contain step and train_loss".into(),
        ));
    };
    let val_col = col("val_loss");

    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let step: Step = field(step_col).parse().map_err(|_| {
            WorkloadError::Malformed(format!(
                "row {}: step `{}` is not an integer",
                line + 1,
                field(step_col)
            ))
        })?;
        let parse_f = |s: &str, name: &str| -> Result<f64, WorkloadError> {
            s.parse().map_err(|_| {
                WorkloadError::Malformed(format!("row {}: {name} `{s}` is not a number", line + 1))
            })
        };
        let train_loss = parse_f(field(train_col), "train_loss")?;
        let val_loss = match val_col.map(field) {
            None | Some("") => None,
            Some(s) => Some(parse_f(s, "val_loss")?),
        };
        rows.push(TraceRow {
            step,
            train_loss,
            val_loss,
        });
    }
    Ok(rows)
}

/// Mix of planted curve behaviours for a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedMix {
    /// Fraction of jobs that are diverging, overfitting or underperforming.
    pub redundant_fraction: f64,
    /// Shares of the redundant jobs; the remainder underperforms.
    pub diverging_share: f64,
    pub overfitting_share: f64,
    pub noise_sigma: f64,
    pub val_noise_sigma: f64,
}

impl Default for PlantedMix {
    fn default() -> Self {
        Self {
            redundant_fraction: 0.75,
            diverging_share: 0.15,
            overfitting_share: 0.2,
            noise_sigma: 0.02,
            val_noise_sigma: 0.002,
        }
    }
}

/// Per-job profiles for a task together with the ground-truth best job.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedProfiles {
    pub profiles: Vec<CurveProfile>,
    pub best_job: u32,
}

/// Assigns curve kinds to `n_jobs` jobs.
///
/// Exactly one converging job gets the lowest floor and the fastest decay, so
/// its clean curves sit strictly below every other job's at every step.
pub fn plant_profiles(
    n_jobs: usize,
    mix: &PlantedMix,
    total_steps: Step,
    seed: u64,
) -> Result<PlantedProfiles, WorkloadError> {
    if n_jobs == 0 {
        return Err(WorkloadError::InvalidProfile("no jobs to plant".into()));
    }
    let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
    if !frac_ok(mix.redundant_fraction)
        || !frac_ok(mix.diverging_share)
        || !frac_ok(mix.overfitting_share)
        || mix.diverging_share + mix.overfitting_share > 1.0
    {
        return Err(WorkloadError::InvalidProfile(
            "planted fractions out of range".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = total_steps as f64;
    let n_red = ((mix.redundant_fraction * n_jobs as f64).round() as usize).min(n_jobs - 1);
    let n_div = (mix.diverging_share * n_red as f64).round() as usize;
    let n_ovf = ((mix.overfitting_share * n_red as f64).round() as usize).min(n_red - n_div);
    let n_under = n_red - n_div - n_ovf;

    let mut kinds = Vec::with_capacity(n_jobs);
    kinds.extend(std::iter::repeat_n(CurveKind::Diverging, n_div));
    kinds.extend(std::iter::repeat_n(CurveKind::Overfitting, n_ovf));
    kinds.extend(std::iter::repeat_n(CurveKind::Underperforming, n_under));
    kinds.extend(std::iter::repeat_n(CurveKind::Converging, n_jobs - n_red));
    // Fisher-Yates so kinds land on arbitrary grid positions.
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    let converging: Vec<usize> = (0..n_jobs)
        .filter(|&i| kinds[i] == CurveKind::Converging)
        .collect();
    let best = converging[rng.random_range(0..converging.len())];

    let noise = |kind| {
        let mut p = CurveProfile::converging(2.0, 0.0, 0.0);
        p.kind = kind;
        p.noise_sigma = mix.noise_sigma;
        p.val_noise_sigma = Some(mix.val_noise_sigma);
        p
    };
    let break_range = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let b = rng.random_range(lo * t..hi * t).round() as Step;
        b.clamp(1, total_steps.saturating_sub(1).max(1))
    };

    let mut profiles = Vec::with_capacity(n_jobs);
    for (i, &kind) in kinds.iter().enumerate() {
        let mut p = noise(kind);
        match kind {
            CurveKind::Converging if i == best => {
                p.floor = 0.3;
                p.decay_rate = 3.5 / t;
            }
            CurveKind::Converging => {
                p.floor = rng.random_range(0.55..0.75);
                p.decay_rate = rng.random_range(2.5..3.2) / t;
            }
            CurveKind::Underperforming => {
                p.floor = rng.random_range(1.0..1.4);
                p.decay_rate = rng.random_range(0.5..1.5) / t;
            }
            CurveKind::Diverging => {
                p.floor = rng.random_range(0.55..0.75);
                p.decay_rate = rng.random_range(2.5..3.2) / t;
                p.break_step = break_range(&mut rng, 0.1, 0.5);
                p.post_break_slope = rng.random_range(0.003..0.008);
            }
            CurveKind::Overfitting => {
                p.floor = rng.random_range(0.55..0.75);
                p.decay_rate = rng.random_range(2.5..3.2) / t;
                p.break_step = break_range(&mut rng, 0.15, 0.5);
                p.post_break_slope = rng.random_range(0.002..0.005);
            }
        }
        profiles.push(p);
    }
    Ok(PlantedProfiles {
        profiles,
        best_job: best as u32,
    })
}

/// Per-job profile overrides keyed by job id.
pub type ProfileOverrideMap = BTreeMap<u32, CurveProfile>;
