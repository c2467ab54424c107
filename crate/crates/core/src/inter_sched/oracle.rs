//! Exhaustive reference solver for tiny instances.
//!
//! Start times are drawn from `{0}` plus every subset sum of durations, which
//! contains all start times of some optimal schedule. Capacity is checked at
//! every start instant inside a candidate interval. Shares nothing with the
//! branch-and-bound search.

use super::{to_micros, Micros, SchedError, SchedInstance};

pub const ORACLE_MAX_TASKS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Optimal makespan in microseconds.
    pub makespan_us: Micros,
    /// Start times (microseconds) in the order of `inst.tasks`.
    pub starts_us: Vec<Micros>,
}

impl OracleResult {
    pub fn makespan(&self) -> f64 {
        self.makespan_us as f64 / 1e6
    }
}

pub fn brute_force_oracle(inst: &SchedInstance) -> Result<OracleResult, SchedError> {
    inst.validate()?;
    let n = inst.tasks.len();
    if n > ORACLE_MAX_TASKS {
        return Err(SchedError::TooLarge {
            n,
            limit: ORACLE_MAX_TASKS,
        });
    }
    let d: Vec<Micros> = inst.tasks.iter().map(|t| to_micros(t.duration)).collect();
    let g: Vec<u32> = inst.tasks.iter().map(|t| t.gpus).collect();
    let pinned: Vec<(Micros, Micros, u32)> = inst
        .pinned
        .iter()
        .map(|p| (0, to_micros(p.remaining), p.gpu_ids.len() as u32))
        .collect();

    let mut grid = vec![0];
    for v in d.iter().copied().chain(pinned.iter().map(|p| p.1)) {
        let mut more: Vec<Micros> = grid.iter().map(|&s| s + v).collect();
        grid.append(&mut more);
        grid.sort_unstable();
        grid.dedup();
    }

    let pin_end = pinned.iter().map(|p| p.1).max().unwrap_or(0);
    let serial: Micros = pin_end + d.iter().sum::<Micros>();
    let mut best = OracleResult {
        makespan_us: serial + 1,
        starts_us: vec![],
    };
    let mut starts = vec![0; n];
    let mut placed = pinned.clone();
    dfs(
        0,
        &d,
        &g,
        inst.gpus,
        &grid,
        &mut placed,
        &mut starts,
        pin_end,
        &mut best,
    );
    Ok(best)
}

fn usage(placed: &[(Micros, Micros, u32)], t: Micros) -> u32 {
    placed
        .iter()
        .filter(|p| p.0 <= t && t < p.1)
        .map(|p| p.2)
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    i: usize,
    d: &[Micros],
    g: &[u32],
    cap: u32,
    grid: &[Micros],
    placed: &mut Vec<(Micros, Micros, u32)>,
    starts: &mut Vec<Micros>,
    cmax: Micros,
    best: &mut OracleResult,
) {
    if i == d.len() {
        // Strict improvement only, so among equal makespans the first found
        // in grid order (lexicographically smallest starts) is kept.
        if cmax < best.makespan_us {
            best.makespan_us = cmax;
            best.starts_us = starts.clone();
        }
        return;
    }
    for &s in grid {
        let e = s + d[i];
        if e.max(cmax) >= best.makespan_us {
            break;
        }
        let ok = usage(placed, s) + g[i] <= cap
            && placed
                .iter()
                .filter(|p| p.0 > s && p.0 < e)
                .all(|p| usage(placed, p.0) + g[i] <= cap);
        if !ok {
            continue;
        }
        placed.push((s, e, g[i]));
        starts[i] = s;
        dfs(i + 1, d, g, cap, grid, placed, starts, cmax.max(e), best);
        placed.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::super::SchedTask;
    use super::*;

    #[test]
    fn refuses_large() {
        let t: Vec<SchedTask> = (0..7)
            .map(|i| SchedTask {
                task_id: i,
                duration: 1.0,
                gpus: 1,
            })
            .collect();
        assert!(matches!(
            brute_force_oracle(&SchedInstance::new(t, 2)),
            Err(SchedError::TooLarge { n: 7, .. })
        ));
    }

    #[test]
    fn packs_tetris() {
        let t = vec![
            SchedTask {
                task_id: 0,
                duration: 2.0,
                gpus: 1,
            },
            SchedTask {
                task_id: 1,
                duration: 3.0,
                gpus: 3,
            },
            SchedTask {
                task_id: 2,
                duration: 2.0,
                gpus: 1,
            },
        ];
        let r = brute_force_oracle(&SchedInstance::new(t, 4)).unwrap();
        assert_eq!(r.makespan_us, 4_000_000);
        assert_eq!(r.starts_us, vec![0, 0, 2_000_000]);
    }
}
