use aeml_core::config::{Problem, RunConfig};
use aeml_core::quant::QuantizerConfig;
use aeml_core::store::{FullStore, Scheme, StageKey, StoreFactory, TrajectoryStore};
use aeml_core::wave::{forward_solve, RK_STAGES};

fn small_problem() -> Problem {
    let mut cfg = RunConfig::desk();
    cfg.grid.cells = vec![16, 16];
    cfg.time.final_time = 0.5;
    cfg.build().unwrap()
}

fn reference(problem: &Problem) -> (FullStore, usize) {
    let mut full = FullStore::new();
    forward_solve(&problem.truth, &problem.forward, &mut full).unwrap();
    let len = problem.forward.state_len();
    (full, len)
}

/// Largest absolute deviation of every stage state from the uncompressed trajectory.
fn worst_deviation(problem: &Problem, factory: &StoreFactory) -> (f64, Box<dyn TrajectoryStore>) {
    let (mut full, len) = reference(problem);
    let steps = problem.forward.time.num_steps;
    let mut store = factory.build(problem.grid(), steps).unwrap();
    forward_solve(&problem.truth, &problem.forward, store.as_mut()).unwrap();
    assert!(store.is_sealed());
    let (mut want, mut got) = (vec![0.0; len], vec![0.0; len]);
    let mut worst = 0.0f64;
    for t in (0..steps).rev() {
        for s in (0..RK_STAGES).rev() {
            let key = StageKey::new(t, s);
            full.get(key, &mut want).unwrap();
            store.get(key, &mut got).unwrap();
            worst = want.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    (worst, store)
}

#[test]
fn checkpoint_replays_the_exact_trajectory() {
    let problem = small_problem();
    for interval in [None, Some(1), Some(3), Some(1000)] {
        let (worst, store) = worst_deviation(&problem, &StoreFactory::Checkpoint { interval });
        assert_eq!(worst, 0.0, "interval {interval:?}");
        assert!(store.stats().bytes_resident <= store.stats().bytes_logical);
    }
}

#[test]
fn quantized_store_respects_its_tolerance_under_both_schemes() {
    let problem = small_problem();
    for scheme in [Scheme::Space, Scheme::Time { window: 16 }] {
        for tolerance in [1e-2, 1e-5] {
            let config = QuantizerConfig { tolerance, block_size: 64 };
            let (worst, store) = worst_deviation(&problem, &StoreFactory::Quant { config, scheme });
            assert!(worst <= tolerance, "{scheme:?} {tolerance}: {worst}");
            assert_eq!(store.tolerance(), Some(tolerance));
            assert!(store.stats().compression_ratio_paper > 1.0);
        }
    }
}

#[test]
fn sealed_store_rejects_further_puts() {
    let problem = small_problem();
    let len = problem.forward.state_len();
    for factory in [StoreFactory::Full, StoreFactory::Checkpoint { interval: Some(4) }] {
        let mut store = factory.build(problem.grid(), problem.forward.time.num_steps).unwrap();
        forward_solve(&problem.truth, &problem.forward, store.as_mut()).unwrap();
        assert!(store.put(StageKey::new(0, 0), &vec![0.0; len]).is_err(), "{}", factory.label());
    }
}

#[test]
fn missing_keys_are_errors() {
    let problem = small_problem();
    let (mut full, len) = reference(&problem);
    let past_end = StageKey::new(problem.forward.time.num_steps, 0);
    assert!(full.get(past_end, &mut vec![0.0; len]).is_err());
}
