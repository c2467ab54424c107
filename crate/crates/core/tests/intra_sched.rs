use std::collections::BTreeSet;

use loratune::intra_sched::*;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Admit(Vec<(u32, u32)>),
    Backfill(usize, Vec<(u32, u32)>),
}

fn arb_ops() -> impl Strategy<Value = Vec<Op>> {
    let reqs = prop::collection::vec((0u32..40, 1u32..17), 0..10);
    prop::collection::vec(
        prop_oneof![
            reqs.clone().prop_map(Op::Admit),
            (any::<usize>(), reqs).prop_map(|(i, q)| Op::Backfill(i, q)),
        ],
        1..25,
    )
}

fn to_reqs(v: &[(u32, u32)]) -> Vec<SlotRequest> {
    v.iter()
        .map(|&(job_id, batch_size)| SlotRequest { job_id, batch_size })
        .collect()
}

fn model(budget: u64) -> MemoryModel {
    MemoryModel {
        k0: 1.0,
        k1: 2.0,
        seq_len: 4,
        capacity: 1.0 + 8.0 * budget as f64,
        safety_margin: 1.0,
    }
}

fn apply(state: &mut ExecutorState, op: &Op, m: &MemoryModel) {
    match op {
        Op::Admit(p) => {
            admit(state, &to_reqs(p), m);
        }
        Op::Backfill(i, q) => {
            let resident = state.resident();
            if !resident.is_empty() {
                let victim = resident[i % resident.len()].job_id;
                backfill(state, victim, &to_reqs(q), m);
            }
        }
    }
}

fn check_disjoint(state: &ExecutorState) -> Result<(), TestCaseError> {
    let mut seen = BTreeSet::new();
    for (r, jobs) in state.per_rank.iter().enumerate() {
        for &j in jobs.keys() {
            prop_assert!(seen.insert(j), "job {} on two ranks", j);
            prop_assert_eq!(state.rank_of(j), Some(r));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_sequence_stays_safe_and_disjoint(ops in arb_ops(), ranks in 1u32..5, budget in 1u64..64) {
        let m = model(budget);
        let mut st = ExecutorState::new(ranks);
        for op in &ops {
            apply(&mut st, op, &m);
            prop_assert!(st.is_safe(&m));
            for r in 0..ranks as usize {
                prop_assert!(m.fits(st.rank_batch(r)) || st.per_rank[r].is_empty());
            }
            check_disjoint(&st)?;
        }
    }

    #[test]
    fn replay_gives_identical_state(ops in arb_ops(), ranks in 1u32..5, budget in 1u64..64) {
        let m = model(budget);
        let mut a = ExecutorState::new(ranks);
        let mut b = ExecutorState::new(ranks);
        for op in &ops {
            apply(&mut a, op, &m);
            apply(&mut b, op, &m);
        }
        prop_assert_eq!(a.per_rank, b.per_rank);
    }

    #[test]
    fn removal_never_shrinks_admissible_set(
        ops in arb_ops(),
        ranks in 1u32..4,
        budget in 1u64..64,
        pick in any::<usize>(),
        cand in 1u32..17,
    ) {
        let m = model(budget);
        let mut st = ExecutorState::new(ranks);
        for op in &ops {
            apply(&mut st, op, &m);
        }
        let resident = st.resident();
        prop_assume!(!resident.is_empty());
        let probe = [SlotRequest { job_id: 1000, batch_size: cand }];
        let before = !admit(&mut st.clone(), &probe, &m).is_empty();
        let mut smaller = st.clone();
        smaller.remove(resident[pick % resident.len()].job_id);
        let after = !admit(&mut smaller, &probe, &m).is_empty();
        prop_assert!(!before || after);
    }

    #[test]
    fn fit_recovers_exact_coefficients(
        k0 in 1e6f64..1e10,
        k1 in 1.0f64..1e5,
        seq_len in 1u32..4096,
        points in prop::collection::btree_set((1u32..16, 1u32..32), 2..12),
    ) {
        let samples: Vec<MemorySample> = points
            .iter()
            .map(|&(n, b)| MemorySample { n, b, bytes: k0 + k1 * f64::from(n * b) * f64::from(seq_len) })
            .collect();
        let distinct: BTreeSet<u32> = points.iter().map(|&(n, b)| n * b).collect();
        prop_assume!(distinct.len() >= 2);
        let fit = fit_memory_model(&samples, seq_len).unwrap();
        prop_assert!((fit.k0 - k0).abs() <= 1e-9 * k0.max(k1 * f64::from(seq_len) * 512.0));
        prop_assert!((fit.k1 - k1).abs() <= 1e-9 * k1);
        prop_assert!(fit.r_squared > 1.0 - 1e-9);
    }

    #[test]
    fn bmax_matches_linear_scan(
        k0 in 0.0f64..100.0,
        k1 in 0.01f64..10.0,
        capacity in 100.0f64..5000.0,
        margin in 0.5f64..=1.0,
    ) {
        let measure = |b: u64| k0 + k1 * b as f64;
        let budget = margin * capacity;
        prop_assume!(measure(1) <= budget);
        let mut want = 1u64;
        while measure(want + 1) <= budget {
            want += 1;
        }
        let got = find_bmax(measure, capacity, margin, 1 << 20).unwrap();
        prop_assert_eq!(got.b_max, want);
    }
}

#[test]
fn nothing_fits_is_an_error() {
    assert!(find_bmax(|_| 10.0, 5.0, 1.0, 64).is_err());
}

#[test]
fn profiling_recovers_planted_model() {
    let (k0, k1, l) = (2.0e9, 3.0e4, 512u32);
    let measure = |b: u64| k0 + k1 * b as f64 * f64::from(l);
    let report = profile_memory(measure, 24.0e9, 0.9, l).unwrap();
    let want = ((0.9 * 24.0e9 - k0) / (k1 * f64::from(l))).floor() as u64;
    assert_eq!(report.b_max, want);
    assert!((report.fit.k1 - k1).abs() / k1 < 1e-9);
    assert!((report.fit.k0 - k0).abs() / k0 < 1e-9);
}

#[test]
fn admission_fills_largest_first() {
    let m = model(8);
    let mut st = ExecutorState::new(2);
    let got = admit(&mut st, &to_reqs(&[(1, 2), (2, 8), (3, 4), (4, 4)]), &m);
    let ids: Vec<u32> = got.iter().map(|a| a.job_id).collect();
    assert_eq!(ids, vec![2, 3, 4]);
    assert_eq!((st.rank_batch(0), st.rank_batch(1)), (8, 8));
}
