use loratune::workload::*;
use proptest::prelude::*;

fn linreg(points: &[(Step, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let den: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    num / den
}

fn arb_profile() -> impl Strategy<Value = CurveProfile> {
    (
        prop_oneof![
            Just(CurveKind::Converging),
            Just(CurveKind::Diverging),
            Just(CurveKind::Overfitting),
            Just(CurveKind::Underperforming)
        ],
        1.0f64..3.0,
        0.001f64..0.05,
        1u64..150,
        0.001f64..0.1,
        0.0f64..0.2,
        0.1f64..0.9,
    )
        .prop_map(
            |(kind, base, decay, brk, slope, noise, floor)| CurveProfile {
                kind,
                base_level: base,
                decay_rate: decay,
                break_step: brk,
                post_break_slope: slope,
                noise_sigma: noise,
                val_noise_sigma: None,
                floor,
                val_gap: 0.02,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn expansion_count_is_axis_product(
        lr in prop::collection::vec(1e-6f64..1e-2, 1..6),
        rank in prop::collection::vec(1u32..256, 1..5),
        bs in prop::collection::vec(1u32..64, 1..5),
        steps in 1u64..1000,
    ) {
        let ss = SearchSpace { lr: lr.clone(), rank: rank.clone(), batch_size: bs.clone() };
        let jobs = expand_search_space(&ss, steps).unwrap();
        prop_assert_eq!(jobs.len(), lr.len() * rank.len() * bs.len());
        for (i, j) in jobs.iter().enumerate() {
            prop_assert_eq!(j.job_id as usize, i);
        }
    }

    #[test]
    fn generation_is_deterministic(p in arb_profile(), seed in any::<u64>()) {
        let a = generate_trajectory(&p, 200, 10, seed).unwrap();
        let b = generate_trajectory(&p, 200, 10, seed).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn clean_diverging_slopes_after_break(
        mut p in arb_profile(),
        w in 2usize..6,
    ) {
        p.kind = CurveKind::Diverging;
        p.noise_sigma = 0.0;
        p.val_noise_sigma = Some(0.0);
        let t = generate_trajectory(&p, 200, 5, 0).unwrap();
        let bound = p.post_break_slope * (1.0 - 1e-9);
        let train_after: Vec<_> = t.train.iter().copied().filter(|s| s.0 >= p.break_step).collect();
        for win in train_after.windows(w) {
            prop_assert!(linreg(win) >= bound);
        }
        let val_after: Vec<_> = t.val.iter().copied().filter(|s| s.0 >= p.break_step).collect();
        for win in val_after.windows(w) {
            prop_assert!(linreg(win) >= bound);
        }
    }

    #[test]
    fn ingestion_round_trips(p in arb_profile(), seed in any::<u64>()) {
        let traj = generate_trajectory(&p, 160, 7, seed).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let rows = read_trace_rows(buf.as_slice()).unwrap();
        let back = ingest_trace(&rows, 0.1).unwrap();
        prop_assert!(!back.reordered);
        prop_assert_eq!(back.trajectory, traj);
    }
}

#[test]
fn ingest_examples() {
    let rows = [
        TraceRow {
            step: 0,
            train_loss: 2.0,
            val_loss: None,
        },
        TraceRow {
            step: 1,
            train_loss: 1.9,
            val_loss: None,
        },
        TraceRow {
            step: 2,
            train_loss: 1.8,
            val_loss: Some(1.85),
        },
    ];
    let t = ingest_trace(&rows, 0.1).unwrap().trajectory;
    assert_eq!((t.train.len(), t.val.len()), (3, 1));
    assert!(ingest_trace(
        &[TraceRow {
            step: 0,
            train_loss: f64::INFINITY,
            val_loss: None
        }],
        0.1
    )
    .is_err());
    assert!(ingest_trace(&[], 0.1).unwrap().trajectory.is_empty());
}

#[test]
fn diverging_closed_form() {
    let mut p = CurveProfile::converging(2.0, 0.01, 0.5);
    p.kind = CurveKind::Diverging;
    p.break_step = 50;
    p.post_break_slope = 0.05;
    let t = generate_trajectory(&p, 100, 10, 3).unwrap();
    let at = |s: Step| t.train.iter().find(|x| x.0 == s).unwrap().1;
    assert!((at(60) - at(50) - 0.5).abs() < 1e-12);
}
