use aeml_core::adjoint::{misfit_and_gradient, FwiProblem};
use aeml_core::config::{Problem, RunConfig};
use aeml_core::dias::basis_from_gradients;
use aeml_core::linalg::rel_l2;
use aeml_core::newton::{solve_map, NewtonConfig};
use aeml_core::quant::QuantizerConfig;
use aeml_core::store::{FullStore, Scheme, StageKey, StoreFactory, TrajectoryStore};
use aeml_core::wave::{forward_solve, SourceKind, TimeAxis};
use proptest::prelude::*;

fn uniform_problem(final_time: f64) -> Problem {
    short_pulse_problem(final_time, false)
}

/// 16² grid with short source pulses.
fn short_pulse_problem(final_time: f64, inclusion: bool) -> Problem {
    let mut cfg = RunConfig::desk();
    cfg.grid.cells = vec![16, 16];
    if !inclusion {
        cfg.medium.inclusions.clear();
    }
    cfg.time.final_time = final_time;
    for s in &mut cfg.sources {
        s.t_c = 0.3;
        s.sigma_t = 0.05;
    }
    cfg.build().unwrap()
}

#[test]
fn point_source_and_receiver_are_reciprocal() {
    let problem = uniform_problem(0.8);
    let grid = problem.grid().clone();
    let (a, b) = (grid.index(4, 6), grid.index(10, 10));
    let trace = |from: usize, to: usize, axis: usize| -> Vec<f64> {
        let mut cfg = problem.forward.clone();
        let mut src = cfg.sources[0].clone();
        src.kind = SourceKind::Gaussian;
        src.location = grid.coord(from).to_vec();
        src.direction = if axis == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        cfg.sources = vec![src];
        cfg.receivers = vec![to];
        let out = forward_solve(&problem.truth, &cfg, &mut FullStore::new()).unwrap();
        out.observations.chunks(2).map(|v| v[axis]).collect()
    };
    for axis in 0..2 {
        let (ab, ba) = (trace(a, b, axis), trace(b, a, axis));
        assert!(ab.iter().any(|v| v.abs() > 0.0));
        assert!(rel_l2(&ab, &ba) < 1e-8, "axis {axis}: {}", rel_l2(&ab, &ba));
    }
}

#[test]
fn energy_does_not_grow_after_the_source_switches_off() {
    let problem = uniform_problem(3.0);
    let mut store = FullStore::new();
    forward_solve(&problem.truth, &problem.forward, &mut store).unwrap();
    let n = problem.grid().node_count();
    let (dt, steps) = (problem.forward.time.dt, problem.forward.time.num_steps);
    let off = ((0.3 + 5.0 * 0.05) / dt).ceil() as usize;
    let mut state = vec![0.0; problem.forward.state_len()];
    let mut energy = |t: usize| {
        store.get(StageKey::new(t, 0), &mut state).unwrap();
        (0..n)
            .map(|i| {
                let rho = problem.forward.density[i];
                let c = problem.truth[i];
                rho * (state[i].powi(2) + state[n + i].powi(2)) + rho * c * c * state[2 * n + i].powi(2)
            })
            .sum::<f64>()
    };
    let start = energy(off);
    assert!(start > 0.0);
    let peak = (off..steps).map(&mut energy).fold(0.0, f64::max);
    assert!(peak < 1.01 * start, "energy {start} grew to {peak}");
}

#[test]
fn lossy_gradient_error_tracks_store_error() {
    let problem = uniform_problem(0.8);
    let u = problem.initial_guess();
    let (_, g_full, _, _) = misfit_and_gradient(&problem.objective, &u, Box::new(FullStore::new())).unwrap();
    let steps = problem.objective.config.time.num_steps;
    for tolerance in [1e-3, 1e-5] {
        let factory = StoreFactory::Quant { config: QuantizerConfig { tolerance, block_size: 64 }, scheme: Scheme::Time { window: 16 } };
        let (_, g_lossy, _, _) = misfit_and_gradient(&problem.objective, &u, factory.build(problem.grid(), steps).unwrap()).unwrap();
        let mut full = FullStore::new();
        forward_solve(&u, &problem.objective.config, &mut full).unwrap();
        let mut lossy = factory.build(problem.grid(), steps).unwrap();
        forward_solve(&u, &problem.objective.config, lossy.as_mut()).unwrap();
        let len = problem.objective.config.state_len();
        let (mut want, mut got) = (vec![0.0; len], vec![0.0; len]);
        let mut worst = 0.0f64;
        for i in (0..steps * 4).rev() {
            let key = StageKey::from_linear(i);
            full.get(key, &mut want).unwrap();
            lossy.get(key, &mut got).unwrap();
            if want.iter().any(|v| *v != 0.0) {
                worst = worst.max(rel_l2(&got, &want));
            }
        }
        let drift = rel_l2(&g_lossy, &g_full);
        assert!(drift < 10.0 * worst, "eta {tolerance}: gradient drift {drift}, store error {worst}");
    }
}

#[test]
fn newton_decreases_objective_and_checkpoint_adds_exact_recompute() {
    let problem = short_pulse_problem(0.8, true);
    let newton = NewtonConfig { max_newton_iters: 3, ..Default::default() };
    let solve = |store: StoreFactory| {
        let model = FwiProblem { objective: problem.objective.clone(), store };
        solve_map(&model, &problem.prior, &problem.initial_guess(), &newton).unwrap()
    };
    let full = solve(StoreFactory::Full);
    let ckpt = solve(StoreFactory::Checkpoint { interval: None });
    assert_eq!(full.history.len(), ckpt.history.len());
    for pair in full.history.windows(2) {
        assert!(pair[1].objective <= pair[0].objective);
    }
    for (f, c) in full.history.iter().zip(&ckpt.history) {
        assert_eq!(c.grad_counter.recompute_sweeps - f.grad_counter.recompute_sweeps, 1.0);
        assert_eq!(c.hvp_counter.recompute_sweeps - f.hvp_counter.recompute_sweeps, 2.0 * c.n_hvp as f64);
        assert_eq!(c.objective, f.objective);
    }
    assert_eq!(full.u, ckpt.u);
}

#[test]
fn zero_timestep_is_rejected() {
    let problem = uniform_problem(0.5);
    let mut cfg = problem.forward.clone();
    cfg.time = TimeAxis { dt: 0.0, num_steps: 4 };
    assert!(forward_solve(&problem.truth, &cfg, &mut FullStore::new()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eigenvalues_ignore_sample_order(seed in any::<u64>(), m in 3usize..12) {
        use rand::{Rng, SeedableRng};
        use rand::seq::SliceRandom;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let grads: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let mut shuffled = grads.clone();
        shuffled.shuffle(&mut rng);
        let r = 3.min(m);
        let a = basis_from_gradients(&grads, r, vec![0.0; n]).unwrap();
        let b = basis_from_gradients(&shuffled, r, vec![0.0; n]).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((x - y).abs() <= 1e-12 * a.eigenvalues[0]);
        }
    }
}
