//! Packing adapters into one executor under a fitted linear memory model.
//!
//! Memory is modelled as `k0 + k1 * B * L` for total batch `B` and sequence
//! length `L`. Profiling finds the largest batch that fits by binary search,
//! sweeps an `(N, b)` grid under that bound and fits the coefficients by least
//! squares. At runtime jobs are admitted greedily in decreasing batch size and
//! vacated slots are backfilled, preferring an equal batch size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("need samples at >= 2 distinct total batch sizes, got {0}")]
    RankDeficient(usize),
    #[error("even a total batch of 1 exceeds the memory budget ({need} > {budget})")]
    NothingFits { need: f64, budget: f64 },
    #[error("invalid memory model: {0}")]
    Invalid(String),
}

pub const DEFAULT_SAFETY_MARGIN: f64 = 0.9;
pub const PROFILE_BATCH_SIZES: [u32; 6] = [1, 2, 4, 8, 16, 32];

fn default_margin() -> f64 {
    DEFAULT_SAFETY_MARGIN
}

/// Peak memory `k0 + k1 * B * seq_len`, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub k0: f64,
    pub k1: f64,
    pub seq_len: u32,
    pub capacity: f64,
    #[serde(default = "default_margin")]
    pub safety_margin: f64,
}

impl MemoryModel {
    pub fn predict(&self, total_batch: u64) -> f64 {
        self.k0 + self.k1 * total_batch as f64 * f64::from(self.seq_len)
    }

    pub fn budget(&self) -> f64 {
        self.safety_margin * self.capacity
    }

    pub fn fits(&self, total_batch: u64) -> bool {
        self.predict(total_batch) <= self.budget()
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        let ok = self.k0.is_finite()
            && self.k1.is_finite()
            && self.k1 >= 0.0
            && self.capacity > 0.0
            && self.seq_len > 0
            && self.safety_margin > 0.0
            && self.safety_margin <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(MemoryError::Invalid(format!("{self:?}")))
        }
    }
}

/// One profiling measurement: `n` adapters of batch size `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub n: u32,
    pub b: u32,
    pub bytes: f64,
}

impl MemorySample {
    pub fn total_batch(&self) -> u64 {
        u64::from(self.n) * u64::from(self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFit {
    pub k0: f64,
    pub k1: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `bytes = k0 + k1 * B * seq_len`.
pub fn fit_memory_model(samples: &[MemorySample], seq_len: u32) -> Result<MemoryFit, MemoryError> {
    let mut distinct: Vec<u64> = samples.iter().map(MemorySample::total_batch).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(MemoryError::RankDeficient(distinct.len()));
    }
    let l = f64::from(seq_len);
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| s.total_batch() as f64 * l).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = samples.iter().map(|s| s.bytes).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, s) in xs.iter().zip(samples) {
        let dx = x - x_mean;
        let dy = s.bytes - y_mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let k1 = sxy / sxx;
    let k0 = y_mean - k1 * x_mean;
    let ss_res: f64 = xs
        .iter()
        .zip(samples)
        .map(|(x, s)| (s.bytes - (k0 + k1 * x)).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(MemoryFit { k0, k1, r_squared })
}

/// Result of a `B_max` search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmaxSearch {
    pub b_max: u64,
    pub probes: u32,
}

/// Largest total batch whose measured memory is within `margin * capacity`.
///
/// Doubles until the budget is exceeded, then bisects; `measure` must be
/// non-decreasing. `limit` bounds the search for measures that never exceed.
pub fn find_bmax(
    mut measure: impl FnMut(u64) -> f64,
    capacity: f64,
    margin: f64,
    limit: u64,
) -> Result<BmaxSearch, MemoryError> {
    let budget = margin * capacity;
    let mut probes = 1;
    let first = measure(1);
    if first > budget {
        return Err(MemoryError::NothingFits {
            need: first,
            budget,
        });
    }
    let mut lo = 1u64; // fits
    let mut hi = None; // first known not to fit
    while hi.is_none() && lo < limit {
        let next = (lo * 2).min(limit);
        probes += 1;
        if measure(next) <= budget {
            lo = next;
        } else {
            hi = Some(next);
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            probes += 1;
            if measure(mid) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok(BmaxSearch { b_max: lo, probes })
}

/// Measures every feasible `(N, b)` grid point: for each `b <= B_max`, `N = 1`
/// and the largest `N` with `N * b <= B_max`.
pub fn profile_grid(
    mut measure: impl FnMut(u64) -> f64,
    b_values: &[u32],
    b_max: u64,
) -> Vec<MemorySample> {
    let mut out = Vec::new();
    for &b in b_values {
        if u64::from(b) > b_max || b == 0 {
            continue;
        }
        let n_max = (b_max / u64::from(b)) as u32;
        let mut ns = vec![1];
        if n_max > 1 {
            ns.push(n_max);
        }
        for n in ns {
            let bytes = measure(u64::from(n) * u64::from(b));
            out.push(MemorySample { n, b, bytes });
        }
    }
    out
}

/// Full profiling pass: `B_max` search, grid sweep and fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub b_max: u64,
    pub probes: u32,
    pub fit: MemoryFit,
    pub samples: Vec<MemorySample>,
}

pub fn profile_memory(
    mut measure: impl FnMut(u64) -> f64,
    capacity: f64,
    margin: f64,
    seq_len: u32,
) -> Result<ProfileReport, MemoryError> {
    let search = find_bmax(&mut measure, capacity, margin, 1 << 20)?;
    let mut samples = profile_grid(&mut measure, &PROFILE_BATCH_SIZES, search.b_max);
    if samples
        .iter()
        .map(MemorySample::total_batch)
        .all(|b| b == 1)
    {
        // Only B = 1 fits; a second probe just above it anchors the slope.
        samples.push(MemorySample {
            n: 2,
            b: 1,
            bytes: measure(2),
        });
    }
    let fit = fit_memory_model(&samples, seq_len)?;
    Ok(ProfileReport {
        b_max: search.b_max,
        probes: search.probes,
        fit,
        samples,
    })
}

/// A job waiting for (or holding) an executor slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotRequest {
    pub job_id: u32,
    pub batch_size: u32,
}

/// Resident adapters of one executor, split across adapter-parallel ranks.
///
/// Each rank holds a disjoint set of jobs and its own memory budget, since
/// the model is profiled per rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorState {
    pub rank_count: u32,
    /// rank -> resident jobs, ordered by job id.
    pub per_rank: Vec<BTreeMap<u32, u32>>,
}

impl ExecutorState {
    pub fn new(rank_count: u32) -> Self {
        let rank_count = rank_count.max(1);
        Self {
            rank_count,
            per_rank: vec![BTreeMap::new(); rank_count as usize],
        }
    }

    pub fn rank_batch(&self, rank: usize) -> u64 {
        self.per_rank[rank].values().map(|&b| u64::from(b)).sum()
    }

    pub fn total_batch(&self) -> u64 {
        (0..self.per_rank.len()).map(|r| self.rank_batch(r)).sum()
    }

    pub fn resident(&self) -> Vec<SlotRequest> {
        let mut all: Vec<SlotRequest> = self
            .per_rank
            .iter()
            .flat_map(|m| {
                m.iter()
                    .map(|(&job_id, &batch_size)| SlotRequest { job_id, batch_size })
            })
            .collect();
        all.sort();
        all
    }

    pub fn len(&self) -> usize {
        self.per_rank.iter().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank_of(&self, job_id: u32) -> Option<usize> {
        self.per_rank.iter().position(|m| m.contains_key(&job_id))
    }

    /// Rank with the smallest total batch; ties go to the lowest rank id.
    pub fn least_loaded_rank(&self) -> usize {
        (0..self.per_rank.len())
            .min_by_key(|&r| (self.rank_batch(r), r))
            .unwrap_or(0)
    }

    pub fn remove(&mut self, job_id: u32) -> Option<(usize, u32)> {
        let rank = self.rank_of(job_id)?;
        self.per_rank[rank].remove(&job_id).map(|b| (rank, b))
    }

    /// Distinct batch sizes resident on a rank; each needs its own grouped pass.
    pub fn batch_classes(&self, rank: usize) -> usize {
        let mut sizes: Vec<u32> = self.per_rank[rank].values().copied().collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes.len()
    }

    /// Whether every rank is within the model's budget.
    pub fn is_safe(&self, model: &MemoryModel) -> bool {
        (0..self.per_rank.len())
            .all(|r| self.per_rank[r].is_empty() || model.fits(self.rank_batch(r)))
    }

    fn place(&mut self, rank: usize, job: SlotRequest) {
        debug_assert!(self.rank_of(job.job_id).is_none(), "job already resident");
        self.per_rank[rank].insert(job.job_id, job.batch_size);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admission {
    pub job_id: u32,
    pub rank: usize,
}

/// Greedy admission in `(batch_size desc, job_id asc)` order.
///
/// Each job goes to the least-loaded rank if the model predicts that rank
/// stays within budget; rejected jobs do not stop the scan.
pub fn admit(
    state: &mut ExecutorState,
    pending: &[SlotRequest],
    model: &MemoryModel,
) -> Vec<Admission> {
    let mut order = pending.to_vec();
    order.sort_by(|a, b| {
        b.batch_size
            .cmp(&a.batch_size)
            .then(a.job_id.cmp(&b.job_id))
    });
    let mut admitted = Vec::new();
    for job in order {
        if state.rank_of(job.job_id).is_some() {
            continue;
        }
        let rank = state.least_loaded_rank();
        if model.fits(state.rank_batch(rank) + u64::from(job.batch_size)) {
            state.place(rank, job);
            admitted.push(Admission {
                job_id: job.job_id,
                rank,
            });
        }
    }
    admitted
}

/// Refills the slot freed by `exited_job` from `queue`.
///
/// Among queued jobs that fit the vacated rank, an equal batch size wins;
/// otherwise the largest fitting batch size. Ties go to the lowest job id.
pub fn backfill(
    state: &mut ExecutorState,
    exited_job: u32,
    queue: &[SlotRequest],
    model: &MemoryModel,
) -> Option<Admission> {
    let (rank, exited_b) = state.remove(exited_job)?;
    let base = state.rank_batch(rank);
    let fitting = queue.iter().filter(|j| {
        state.rank_of(j.job_id).is_none() && model.fits(base + u64::from(j.batch_size))
    });
    let pick = fitting.min_by(|a, b| {
        let key = |j: &SlotRequest| {
            (
                j.batch_size != exited_b,
                std::cmp::Reverse(j.batch_size),
                j.job_id,
            )
        };
        key(a).cmp(&key(b))
    })?;
    state.place(rank, *pick);
    Some(Admission {
        job_id: pick.job_id,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with_budget(total_batch: u64) -> MemoryModel {
        // predict(B) = B, budget = total_batch.
        MemoryModel {
            k0: 0.0,
            k1: 1.0,
            seq_len: 1,
            capacity: total_batch as f64,
            safety_margin: 1.0,
        }
    }

    fn req(job_id: u32, batch_size: u32) -> SlotRequest {
        SlotRequest { job_id, batch_size }
    }

    #[test]
    fn exact_fit_recovery() {
        let (k0, k1, l) = (1e9, 1e6, 1024);
        let samples: Vec<_> = [1u32, 2, 4]
            .iter()
            .map(|&b| MemorySample {
                n: 1,
                b,
                bytes: k0 + k1 * f64::from(b) * f64::from(l),
            })
            .collect();
        let fit = fit_memory_model(&samples, l).unwrap();
        assert!(((fit.k0 - k0) / k0).abs() < 1e-9);
        assert!(((fit.k1 - k1) / k1).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_batch_is_rank_deficient() {
        let s = [
            MemorySample {
                n: 2,
                b: 2,
                bytes: 1.0,
            },
            MemorySample {
                n: 4,
                b: 1,
                bytes: 2.0,
            },
        ];
        assert_eq!(fit_memory_model(&s, 8), Err(MemoryError::RankDeficient(1)));
    }

    #[test]
    fn bmax_examples() {
        assert_eq!(
            find_bmax(|b| 10.0 + b as f64, 100.0, 0.9, 1 << 20)
                .unwrap()
                .b_max,
            80
        );
        let budget = 0.5 * 140.0;
        let m = |b: u64| b as f64 * 10.0;
        assert_eq!(find_bmax(m, 140.0, 0.5, 1 << 20).unwrap().b_max, 7);
        assert_eq!(m(7), budget);
        assert!(matches!(
            find_bmax(|_| 1000.0, 100.0, 0.9, 1 << 20),
            Err(MemoryError::NothingFits { .. })
        ));
    }

    #[test]
    fn bmax_probe_count_is_logarithmic() {
        let s = find_bmax(|b| b as f64, 1_000_000.0, 1.0, 1 << 30).unwrap();
        assert_eq!(s.b_max, 1_000_000);
        assert!(s.probes <= 2 * 21, "{}", s.probes);
    }

    #[test]
    fn grid_filters() {
        let g = profile_grid(|b| b as f64, &PROFILE_BATCH_SIZES, 8);
        assert!(g.iter().all(|s| s.b <= 8));
        let g = profile_grid(|b| b as f64, &PROFILE_BATCH_SIZES, 32);
        let ns: Vec<u32> = g.iter().filter(|s| s.b == 8).map(|s| s.n).collect();
        assert_eq!(ns, vec![1, 4]);
        assert!(g.iter().all(|s| s.total_batch() <= 32));
    }

    #[test]
    fn greedy_does_not_backtrack() {
        let mut st = ExecutorState::new(1);
        let pending = [req(0, 8), req(1, 4), req(2, 4), req(3, 1)];
        let got = admit(&mut st, &pending, &model_with_budget(8));
        assert_eq!(got, vec![Admission { job_id: 0, rank: 0 }]);
        assert_eq!(st.total_batch(), 8);
        assert!(admit(&mut st, &[], &model_with_budget(8)).is_empty());
    }

    #[test]
    fn balance_across_ranks() {
        let mut st = ExecutorState::new(2);
        let got = admit(&mut st, &[req(0, 2), req(1, 2)], &model_with_budget(2));
        assert_eq!(
            got,
            vec![
                Admission { job_id: 0, rank: 0 },
                Admission { job_id: 1, rank: 1 }
            ]
        );
    }

    #[test]
    fn backfill_prefers_same_size_then_lowest_id() {
        let model = model_with_budget(16);
        let mut st = ExecutorState::new(1);
        admit(&mut st, &[req(100, 4)], &model);
        let queue = [req(5, 2), req(9, 4), req(3, 4)];
        let got = backfill(&mut st, 100, &queue, &model).unwrap();
        assert_eq!(got.job_id, 3);
    }

    #[test]
    fn backfill_accepts_mixed_sizes() {
        let model = model_with_budget(4);
        let mut st = ExecutorState::new(1);
        admit(&mut st, &[req(100, 4)], &model);
        let queue = [req(7, 8), req(5, 2)];
        assert_eq!(backfill(&mut st, 100, &queue, &model).unwrap().job_id, 5);
    }

    #[test]
    fn backfill_empty_queue_reclaims() {
        let model = model_with_budget(4);
        let mut st = ExecutorState::new(1);
        admit(&mut st, &[req(1, 4)], &model);
        assert_eq!(backfill(&mut st, 1, &[], &model), None);
        assert_eq!(st.total_batch(), 0);
    }
}
