//! Seeded synthetic workloads used by the benchmarks and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, ClusterSpec, TaskSpec, WorkloadSpec};
use crate::workload::{PlantedMix, SearchSpace};

/// One 1-GPU task with 165 configurations (11 lr x 3 ranks x 5 batch sizes)
/// over 400 steps, 75% of them planted redundant.
pub fn redundancy_workload() -> WorkloadSpec {
    let search_space = SearchSpace {
        lr: (1..=11).map(|i| 1e-5 * f64::from(i)).collect(),
        rank: vec![16, 32, 64],
        batch_size: vec![1, 2, 4, 8, 16],
    };
    WorkloadSpec {
        tasks: vec![TaskSpec {
            task_id: 0,
            gpu_requirement: 1,
            total_samples: None,
            arrival_time: 0.0,
            search_space,
            total_steps: 400,
            profile_overrides: Default::default(),
            planted: PlantedMix::default(),
            cost_scale: 1.0,
        }],
        detector: Default::default(),
        eval_interval: 10,
        profiling_steps: 20,
    }
}

/// GPU requirement and per-step cost scale of the eleven cluster tasks:
/// two 4-GPU, three 2-GPU and six 1-GPU models.
pub const CLUSTER_SHAPE: [(u32, f64); 11] = [
    (4, 4.0),
    (4, 4.0),
    (2, 2.0),
    (2, 2.0),
    (2, 2.0),
    (1, 1.0),
    (1, 1.0),
    (1, 1.0),
    (1, 1.0),
    (1, 1.0),
    (1, 1.0),
];

/// Eleven heterogeneous tasks arriving together on an 8-GPU cluster. Each
/// task draws its redundancy from [0.72, 0.83) and its length from
/// 200..=600 steps.
pub fn cluster_workload(seed: u64) -> WorkloadSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "suite/cluster"));
    let tasks = CLUSTER_SHAPE
        .iter()
        .enumerate()
        .map(|(i, &(gpus, cost_scale))| {
            let search_space = if gpus == 1 {
                SearchSpace {
                    lr: vec![1e-5, 5e-5, 1e-4, 2e-4, 5e-4],
                    rank: vec![16, 32, 64],
                    batch_size: vec![1, 2, 4, 8],
                }
            } else {
                SearchSpace {
                    lr: vec![1e-5, 5e-5, 1e-4, 2e-4],
                    rank: vec![16, 32, 64, 128],
                    batch_size: vec![1, 2, 4, 8],
                }
            };
            let planted = PlantedMix {
                redundant_fraction: rng.random_range(0.72..0.83),
                ..PlantedMix::default()
            };
            TaskSpec {
                task_id: i as u32,
                gpu_requirement: gpus,
                total_samples: None,
                arrival_time: 0.0,
                search_space,
                total_steps: rng.random_range(20..=60) * 10,
                profile_overrides: Default::default(),
                planted,
                cost_scale,
            }
        })
        .collect();
    WorkloadSpec {
        tasks,
        detector: Default::default(),
        eval_interval: 10,
        profiling_steps: 20,
    }
}

pub fn cluster_spec() -> ClusterSpec {
    ClusterSpec::new(8)
}
