use loratune::inter_sched::oracle::brute_force_oracle;
use loratune::inter_sched::{
    check_plan, plan_from_starts, replan, solve_exact, solve_exact_with, solve_sjf, to_micros,
    ClusterState, PinnedTask, ReplanEvent, RunningTask, SchedInstance, SchedTask, SolverConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> SchedInstance {
    let gpus = if rng.random_bool(0.5) { 4 } else { 8 };
    let tasks = (0..n as u32)
        .map(|task_id| SchedTask {
            task_id,
            duration: rng.random_range(1..=20) as f64,
            gpus: [1, 2, 4][rng.random_range(0..3)],
        })
        .collect();
    SchedInstance::new(tasks, gpus)
}

fn reqs(inst: &SchedInstance) -> Vec<(u32, u32)> {
    inst.tasks.iter().map(|t| (t.task_id, t.gpus)).collect()
}

#[test]
fn exact_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..1000 {
        let n = 1 + k % 6;
        let inst = random_instance(&mut rng, n);
        let plan = solve_exact(&inst).unwrap();
        let oracle = brute_force_oracle(&inst).unwrap();
        assert!(plan.optimal);
        assert_eq!(
            to_micros(plan.makespan),
            oracle.makespan_us,
            "instance {k}: {inst:?}"
        );
        check_plan(&plan, inst.gpus, &reqs(&inst)).unwrap();
        // The oracle's first optimum in grid order is the lexicographically smallest.
        let starts: Vec<u64> = plan
            .assignments
            .iter()
            .map(|a| to_micros(a.start))
            .collect();
        assert_eq!(
            starts, oracle.starts_us,
            "instance {k}: canonical starts differ"
        );
    }
}

#[test]
fn oracle_trivial_cases() {
    let one = SchedInstance::new(
        vec![SchedTask {
            task_id: 0,
            duration: 6.0,
            gpus: 3,
        }],
        4,
    );
    assert_eq!(brute_force_oracle(&one).unwrap().makespan(), 6.0);
    let two = SchedInstance::new(
        vec![
            SchedTask {
                task_id: 0,
                duration: 6.0,
                gpus: 1,
            },
            SchedTask {
                task_id: 1,
                duration: 9.0,
                gpus: 1,
            },
        ],
        2,
    );
    assert_eq!(brute_force_oracle(&two).unwrap().makespan(), 9.0);
}

#[test]
fn sjf_matches_exact_when_all_full_width() {
    let inst = SchedInstance::new(
        (0..4)
            .map(|i| SchedTask {
                task_id: i,
                duration: f64::from(i + 2),
                gpus: 4,
            })
            .collect(),
        4,
    );
    assert_eq!(
        solve_sjf(&inst).unwrap().makespan,
        solve_exact(&inst).unwrap().makespan
    );
}

/// Makespans certified by the oracle before being frozen here.
#[test]
fn sjf_separating_instance() {
    let inst = SchedInstance::new(
        vec![
            SchedTask {
                task_id: 0,
                duration: 2.0,
                gpus: 2,
            },
            SchedTask {
                task_id: 1,
                duration: 3.0,
                gpus: 2,
            },
            SchedTask {
                task_id: 2,
                duration: 4.0,
                gpus: 2,
            },
        ],
        4,
    );
    assert_eq!(brute_force_oracle(&inst).unwrap().makespan(), 5.0);
    assert_eq!(solve_exact(&inst).unwrap().makespan, 5.0);
    assert_eq!(solve_sjf(&inst).unwrap().makespan, 6.0);
}

pub fn cluster_shape(rng: &mut ChaCha8Rng) -> SchedInstance {
    let gpus = [4u32, 2, 2, 2, 1, 1, 1, 1, 1, 1, 1];
    SchedInstance::new(
        gpus.iter()
            .enumerate()
            .map(|(i, &g)| SchedTask {
                task_id: i as u32,
                duration: rng.random_range(60.0..3600.0),
                gpus: g,
            })
            .collect(),
        8,
    )
}

#[test]
fn eleven_tasks_on_eight_gpus_under_a_second() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let inst = cluster_shape(&mut rng);
        let t0 = Instant::now();
        let plan = solve_exact(&inst).unwrap();
        let dt = t0.elapsed();
        assert!(plan.optimal, "not proven optimal in {dt:?}");
        assert!(dt.as_secs_f64() < 1.0, "{dt:?}");
        check_plan(&plan, 8, &reqs(&inst)).unwrap();
    }
}

#[test]
fn node_limit_returns_feasible_incumbent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = cluster_shape(&mut rng);
    let cfg = SolverConfig {
        node_limit: Some(5),
        ..SolverConfig::unlimited()
    };
    let (plan, _) = solve_exact_with(&inst, cfg).unwrap();
    assert!(!plan.optimal);
    check_plan(&plan, 8, &reqs(&inst)).unwrap();
}

#[test]
fn replan_arrival_on_full_cluster_waits_for_release() {
    let st = ClusterState {
        now: 100.0,
        gpus: 4,
        running: vec![
            RunningTask {
                task_id: 0,
                gpu_ids: vec![0, 1],
                start: 50.0,
                remaining: 10.0,
            },
            RunningTask {
                task_id: 1,
                gpu_ids: vec![2, 3],
                start: 60.0,
                remaining: 30.0,
            },
        ],
        queued: vec![SchedTask {
            task_id: 2,
            duration: 5.0,
            gpus: 2,
        }],
    };
    let plan = replan(
        &st,
        ReplanEvent::TaskArrival { task_id: 2 },
        SolverConfig::default(),
    )
    .unwrap();
    let oracle = brute_force_oracle(&SchedInstance {
        tasks: st.queued.clone(),
        gpus: 4,
        pinned: vec![
            PinnedTask {
                task_id: 0,
                gpu_ids: vec![0, 1],
                remaining: 10.0,
            },
            PinnedTask {
                task_id: 1,
                gpu_ids: vec![2, 3],
                remaining: 30.0,
            },
        ],
    })
    .unwrap();
    let a = plan.get(2).unwrap();
    assert_eq!(a.start, 110.0);
    assert_eq!(a.gpu_ids, vec![0, 1]);
    assert_eq!(plan.makespan, 100.0 + oracle.makespan());
    assert_eq!(plan.get(1).unwrap().start, 60.0);
}

#[test]
fn plan_from_starts_rejects_overload() {
    let inst = SchedInstance::new(
        vec![
            SchedTask {
                task_id: 0,
                duration: 2.0,
                gpus: 3,
            },
            SchedTask {
                task_id: 1,
                duration: 2.0,
                gpus: 2,
            },
        ],
        4,
    );
    assert!(plan_from_starts(&inst, &[(0, 0.0), (1, 1.0)]).is_err());
    assert!(plan_from_starts(&inst, &[(0, 0.0), (1, 2.0)]).is_ok());
}

fn arb_instance() -> impl Strategy<Value = SchedInstance> {
    (
        prop_oneof![Just(4u32), Just(8u32)],
        prop::collection::vec((1u32..=20, 0usize..3), 0..8),
    )
        .prop_map(|(gpus, ts)| {
            SchedInstance::new(
                ts.into_iter()
                    .enumerate()
                    .map(|(i, (d, g))| SchedTask {
                        task_id: i as u32,
                        duration: f64::from(d),
                        gpus: [1, 2, 4][g],
                    })
                    .collect(),
                gpus,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn plans_feasible_bounded_and_dominant(inst in arb_instance()) {
        let exact = solve_exact(&inst).unwrap();
        let sjf = solve_sjf(&inst).unwrap();
        check_plan(&exact, inst.gpus, &reqs(&inst)).unwrap();
        check_plan(&sjf, inst.gpus, &reqs(&inst)).unwrap();
        prop_assert!(exact.makespan <= sjf.makespan);
        let lb = inst.lower_bound();
        prop_assert!(exact.makespan >= lb - 1e-9);
        prop_assert!(sjf.makespan >= lb - 1e-9);
    }

    #[test]
    fn exact_is_deterministic(inst in arb_instance()) {
        let a = serde_json::to_string(&solve_exact(&inst).unwrap()).unwrap();
        let b = serde_json::to_string(&solve_exact(&inst).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn replan_never_moves_pinned(inst in arb_instance(), rem in 1u32..30) {
        prop_assume!(!inst.tasks.is_empty());
        let mut tasks = inst.tasks.clone();
        let first = tasks.remove(0);
        let st = ClusterState {
            now: 7.0,
            gpus: inst.gpus,
            running: vec![RunningTask {
                task_id: first.task_id,
                gpu_ids: (0..first.gpus).rev().collect(),
                start: 2.0,
                remaining: f64::from(rem),
            }],
            queued: tasks,
        };
        let plan = replan(&st, ReplanEvent::TaskArrival { task_id: 0 }, SolverConfig::default()).unwrap();
        let pin = plan.get(first.task_id).unwrap();
        prop_assert_eq!(pin.start, 2.0);
        let mut ids: Vec<u32> = (0..first.gpus).collect();
        ids.sort_unstable();
        prop_assert_eq!(&pin.gpu_ids, &ids);
        for a in plan.assignments.iter().filter(|a| !a.pinned) {
            prop_assert!(a.start >= 7.0);
        }
    }
}
