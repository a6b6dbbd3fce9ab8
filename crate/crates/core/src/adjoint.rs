//! Data misfit, its discrete-adjoint gradient and the second-order-adjoint
//! Hessian-vector product, reading forward states only through a
//! [`TrajectoryStore`].

use std::ops::{Add, AddAssign, Sub};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};
use crate::linalg::axpy;
use crate::store::{CheckpointStore, FullStore, StageKey, StoreCounters, StoreFactory, TrajectoryStore};
use crate::wave::{forward_with_model, ForwardConfig, WaveModel, RK_STAGES};

/// Whole-trajectory sweeps and codec calls spent by an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SweepCounter {
    pub forward_sweeps: u64,
    pub adjoint_sweeps: u64,
    pub incfwd_sweeps: u64,
    pub incadj_sweeps: u64,
    /// Forward re-integration by checkpointing, in units of `T` steps.
    pub recompute_sweeps: f64,
    pub compress_calls: u64,
    pub decompress_calls: u64,
    /// Gradient or Hessian-vector assemblies.
    pub assemblies: u64,
}

impl Add for SweepCounter {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            forward_sweeps: self.forward_sweeps + o.forward_sweeps,
            adjoint_sweeps: self.adjoint_sweeps + o.adjoint_sweeps,
            incfwd_sweeps: self.incfwd_sweeps + o.incfwd_sweeps,
            incadj_sweeps: self.incadj_sweeps + o.incadj_sweeps,
            recompute_sweeps: self.recompute_sweeps + o.recompute_sweeps,
            compress_calls: self.compress_calls + o.compress_calls,
            decompress_calls: self.decompress_calls + o.decompress_calls,
            assemblies: self.assemblies + o.assemblies,
        }
    }
}

impl AddAssign for SweepCounter {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for SweepCounter {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Self {
            forward_sweeps: self.forward_sweeps - o.forward_sweeps,
            adjoint_sweeps: self.adjoint_sweeps - o.adjoint_sweeps,
            incfwd_sweeps: self.incfwd_sweeps - o.incfwd_sweeps,
            incadj_sweeps: self.incadj_sweeps - o.incadj_sweeps,
            recompute_sweeps: self.recompute_sweeps - o.recompute_sweeps,
            compress_calls: self.compress_calls - o.compress_calls,
            decompress_calls: self.decompress_calls - o.decompress_calls,
            assemblies: self.assemblies - o.assemblies,
        }
    }
}

/// A data-misfit functional that can be linearised at a parameter field.
pub trait MisfitModel: Send + Sync {
    fn param_dim(&self) -> usize;

    /// Runs the forward problem at `u`, leaving state ready for gradient and Hessian actions.
    fn linearize<'a>(&'a self, u: &[f64]) -> Result<Box<dyn Linearization + 'a>>;
}

/// Misfit evaluation at a fixed parameter field.
pub trait Linearization {
    fn misfit(&self) -> f64;

    /// Cost of the forward evaluation that produced this linearization.
    fn forward_counter(&self) -> SweepCounter;

    fn gradient(&mut self) -> Result<(Vec<f64>, SweepCounter)>;

    fn hessian_vector(&mut self, p: &[f64]) -> Result<(Vec<f64>, SweepCounter)>;
}

/// Wave-equation misfit `½‖F(u) − d‖²/σ²` against recorded traces.
#[derive(Debug, Clone)]
pub struct Objective {
    pub config: ForwardConfig,
    pub data: Vec<f64>,
    pub noise_sigma: f64,
}

impl Objective {
    pub fn new(config: ForwardConfig, data: Vec<f64>, noise_sigma: f64) -> Result<Self> {
        check_len(config.obs_len(), data.len())?;
        if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise level must be positive, got {noise_sigma}")));
        }
        Ok(Self { config, data, noise_sigma })
    }

    /// Clean receiver traces for wavespeed `u`.
    pub fn simulate(config: &ForwardConfig, u: &[f64]) -> Result<Vec<f64>> {
        let model = Arc::new(WaveModel::new(u, config)?);
        let mut store = CheckpointStore::new(config.time.num_steps.max(1));
        Ok(forward_with_model(&model, &mut store)?.observations)
    }

    /// Synthetic data from `u_true` with Gaussian noise of standard deviation
    /// `noise_fraction · max|d|`. The noise level doubles as `σ` of the misfit;
    /// a zero fraction gives exact data and `σ = 1`.
    pub fn synthesize(config: ForwardConfig, u_true: &[f64], noise_fraction: f64, seed: u64) -> Result<Self> {
        let mut data = Self::simulate(&config, u_true)?;
        let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sigma = noise_fraction * peak;
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for d in &mut data {
                *d += noise.sample(&mut rng);
            }
            Self::new(config, data, sigma)
        } else {
            Self::new(config, data, 1.0)
        }
    }

    pub fn param_dim(&self) -> usize {
        self.config.grid.node_count()
    }

    /// Forward solve at `u` into `store`, which must be empty.
    pub fn linearize_with(&self, u: &[f64], mut store: Box<dyn TrajectoryStore>) -> Result<WaveLinearization> {
        let model = Arc::new(WaveModel::new(u, &self.config)?);
        let before = store.counters();
        let out = forward_with_model(&model, store.as_mut())?;
        let residual: Vec<f64> = out.observations.iter().zip(&self.data).map(|(f, d)| f - d).collect();
        let sigma2 = self.noise_sigma * self.noise_sigma;
        let misfit = 0.5 * residual.iter().map(|r| r * r).sum::<f64>() / sigma2;
        let after = store.counters();
        let forward = SweepCounter {
            forward_sweeps: 1,
            compress_calls: after.compress_calls - before.compress_calls,
            ..Default::default()
        };
        Ok(WaveLinearization { model, store, residual, inv_sigma2: 1.0 / sigma2, misfit, forward, u: u.to_vec() })
    }
}

/// [`Objective`] paired with the storage backend used for each forward sweep.
#[derive(Debug, Clone)]
pub struct FwiProblem {
    pub objective: Objective,
    pub store: StoreFactory,
}

impl MisfitModel for FwiProblem {
    fn param_dim(&self) -> usize {
        self.objective.param_dim()
    }

    fn linearize<'a>(&'a self, u: &[f64]) -> Result<Box<dyn Linearization + 'a>> {
        let store = self.store.build(&self.objective.config.grid, self.objective.config.time.num_steps)?;
        Ok(Box::new(self.objective.linearize_with(u, store)?))
    }
}

const STAGE_OFFSET: [f64; RK_STAGES] = [0.0, 0.5, 0.5, 1.0];
const STAGE_WEIGHT: [f64; RK_STAGES] = [1.0, 2.0, 2.0, 1.0];

/// Forward trajectory at one wavespeed field and its residual traces.
pub struct WaveLinearization {
    model: Arc<WaveModel>,
    store: Box<dyn TrajectoryStore>,
    residual: Vec<f64>,
    inv_sigma2: f64,
    misfit: f64,
    forward: SweepCounter,
    u: Vec<f64>,
}

impl WaveLinearization {
    pub fn parameter(&self) -> &[f64] {
        &self.u
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn store(&self) -> &dyn TrajectoryStore {
        self.store.as_ref()
    }

    fn steps(&self) -> usize {
        self.model.time().num_steps
    }

    fn store_delta(&self, before: StoreCounters) -> SweepCounter {
        let after = self.store.counters();
        SweepCounter {
            recompute_sweeps: (after.recompute_steps - before.recompute_steps) as f64 / self.steps() as f64,
            compress_calls: after.compress_calls - before.compress_calls,
            decompress_calls: after.decompress_calls - before.decompress_calls,
            ..Default::default()
        }
    }

    fn check_ready(&self) -> Result<()> {
        if self.store.is_sealed() {
            Ok(())
        } else {
            Err(Error::Ordering("forward trajectory not populated".into()))
        }
    }

    /// Reverse sweep of the RK4 adjoint driven by data-space `forcing` scaled by `scale`.
    /// Returns `Σ (∂_c A Y)ᵀ k̄` over all stages.
    fn adjoint_sweep(&mut self, forcing: &[f64], scale: f64) -> Result<Vec<f64>> {
        self.check_ready()?;
        let model = self.model.clone();
        let (steps, len, m) = (self.steps(), model.state_len(), model.obs_per_step());
        check_len(steps * m, forcing.len())?;
        let dt = model.time().dt;
        let mut grad = vec![0.0; self.u.len()];
        let mut mu = vec![0.0; len];
        if steps == 0 {
            return Ok(grad);
        }
        self.store.rewind();
        model.add_observation_transpose(&forcing[(steps - 1) * m..], scale, &mut mu);
        let mut ys = vec![vec![0.0; len]; RK_STAGES];
        let mut kbar = vec![vec![0.0; len]; RK_STAGES];
        let mut tmp = vec![0.0; len];
        for n in (0..steps).rev() {
            for s in (0..RK_STAGES).rev() {
                self.store.get(StageKey::new(n, s), &mut ys[s])?;
            }
            for (s, kb) in kbar.iter_mut().enumerate() {
                let c = dt * STAGE_WEIGHT[s] / 6.0;
                kb.iter_mut().zip(&mu).for_each(|(k, v)| *k = c * v);
            }
            for s in (0..RK_STAGES).rev() {
                let w = model.apply_transpose(&kbar[s], &mut tmp);
                model.add_param_sensitivity(&ys[s], &w, 1.0, &mut grad);
                axpy(1.0, &tmp, &mut mu);
                if s > 0 {
                    axpy(dt * STAGE_OFFSET[s], &tmp, &mut kbar[s - 1]);
                }
            }
            if n > 0 {
                model.add_observation_transpose(&forcing[(n - 1) * m..n * m], scale, &mut mu);
            }
        }
        Ok(grad)
    }

    /// Tangent-linear sweep in direction `p`. Returns the incremental traces and
    /// optionally records the incremental stage states.
    fn tangent_sweep(&mut self, p: &[f64], mut record: Option<&mut FullStore>) -> Result<Vec<f64>> {
        self.check_ready()?;
        check_len(self.u.len(), p.len())?;
        let model = self.model.clone();
        let (steps, len) = (self.steps(), model.state_len());
        let dt = model.time().dt;
        self.store.rewind();
        let mut yd = vec![0.0; len];
        let mut y = vec![0.0; len];
        let mut stage = vec![0.0; len];
        let mut k = vec![0.0; len];
        let mut acc = vec![0.0; len];
        let mut obs = Vec::with_capacity(steps * model.obs_per_step());
        for n in 0..steps {
            stage.copy_from_slice(&yd);
            acc.fill(0.0);
            for s in 0..RK_STAGES {
                if let Some(rec) = record.as_deref_mut() {
                    rec.put(StageKey::new(n, s), &stage)?;
                }
                self.store.get(StageKey::new(n, s), &mut y)?;
                model.apply(&stage, &mut k);
                model.add_param_derivative(&y, p, &mut k);
                axpy(STAGE_WEIGHT[s], &k, &mut acc);
                if s + 1 < RK_STAGES {
                    let h = dt * STAGE_OFFSET[s + 1];
                    for i in 0..len {
                        stage[i] = yd[i] + h * k[i];
                    }
                }
            }
            axpy(dt / 6.0, &acc, &mut yd);
            model.observe(&yd, &mut obs);
        }
        if let Some(rec) = record {
            rec.finish()?;
        }
        Ok(obs)
    }

    /// Linearised parameter-to-observable map `F′ p`.
    pub fn jacobian_apply(&mut self, p: &[f64]) -> Result<Vec<f64>> {
        self.tangent_sweep(p, None)
    }

    /// Adjoint of the linearised map, `F′ᵀ r`.
    pub fn jacobian_transpose(&mut self, r: &[f64]) -> Result<Vec<f64>> {
        self.adjoint_sweep(r, 1.0)
    }

    /// Joint reverse sweep of the adjoint and the incremental adjoint.
    fn second_order_sweep(&mut self, p: &[f64], inc: &mut FullStore, inc_obs: &[f64]) -> Result<Vec<f64>> {
        let model = self.model.clone();
        let (steps, len, m) = (self.steps(), model.state_len(), model.obs_per_step());
        let dt = model.time().dt;
        let scale = self.inv_sigma2;
        let mut hp = vec![0.0; self.u.len()];
        if steps == 0 {
            return Ok(hp);
        }
        self.store.rewind();
        let mut mu = vec![0.0; len];
        let mut mud = vec![0.0; len];
        model.add_observation_transpose(&self.residual[(steps - 1) * m..], scale, &mut mu);
        model.add_observation_transpose(&inc_obs[(steps - 1) * m..], scale, &mut mud);
        let mut ys = vec![vec![0.0; len]; RK_STAGES];
        let mut yds = vec![vec![0.0; len]; RK_STAGES];
        let mut kbar = vec![vec![0.0; len]; RK_STAGES];
        let mut kbard = vec![vec![0.0; len]; RK_STAGES];
        let (mut tmp, mut tmpd) = (vec![0.0; len], vec![0.0; len]);
        for n in (0..steps).rev() {
            for s in (0..RK_STAGES).rev() {
                self.store.get(StageKey::new(n, s), &mut ys[s])?;
                inc.get(StageKey::new(n, s), &mut yds[s])?;
            }
            for s in 0..RK_STAGES {
                let c = dt * STAGE_WEIGHT[s] / 6.0;
                kbar[s].iter_mut().zip(&mu).for_each(|(k, v)| *k = c * v);
                kbard[s].iter_mut().zip(&mud).for_each(|(k, v)| *k = c * v);
            }
            for s in (0..RK_STAGES).rev() {
                let w = model.apply_transpose(&kbar[s], &mut tmp);
                let wd = model.apply_transpose(&kbard[s], &mut tmpd);
                model.add_transpose_param_derivative(&w, p, 1.0, &mut tmpd);
                model.add_param_sensitivity(&yds[s], &w, 1.0, &mut hp);
                model.add_param_sensitivity(&ys[s], &wd, 1.0, &mut hp);
                model.add_param_sensitivity_curvature(&ys[s], &w, p, 1.0, &mut hp);
                axpy(1.0, &tmp, &mut mu);
                axpy(1.0, &tmpd, &mut mud);
                if s > 0 {
                    axpy(dt * STAGE_OFFSET[s], &tmp, &mut kbar[s - 1]);
                    axpy(dt * STAGE_OFFSET[s], &tmpd, &mut kbard[s - 1]);
                }
            }
            if n > 0 {
                model.add_observation_transpose(&self.residual[(n - 1) * m..n * m], scale, &mut mu);
                model.add_observation_transpose(&inc_obs[(n - 1) * m..n * m], scale, &mut mud);
            }
        }
        Ok(hp)
    }
}

impl Linearization for WaveLinearization {
    fn misfit(&self) -> f64 {
        self.misfit
    }

    fn forward_counter(&self) -> SweepCounter {
        self.forward
    }

    fn gradient(&mut self) -> Result<(Vec<f64>, SweepCounter)> {
        let before = self.store.counters();
        let residual = std::mem::take(&mut self.residual);
        let g = self.adjoint_sweep(&residual, self.inv_sigma2);
        self.residual = residual;
        let counter = SweepCounter { adjoint_sweeps: 1, assemblies: 1, ..self.store_delta(before) };
        Ok((g?, counter))
    }

    /// Full Newton Hessian action: incremental forward into a [`FullStore`], then
    /// one reverse sweep carrying the adjoint and the incremental adjoint together.
    fn hessian_vector(&mut self, p: &[f64]) -> Result<(Vec<f64>, SweepCounter)> {
        let before = self.store.counters();
        let mut inc = FullStore::new();
        let inc_obs = self.tangent_sweep(p, Some(&mut inc))?;
        let hp = self.second_order_sweep(p, &mut inc, &inc_obs)?;
        let counter = SweepCounter {
            incfwd_sweeps: 1,
            incadj_sweeps: 1,
            adjoint_sweeps: 1,
            assemblies: 1,
            ..self.store_delta(before)
        };
        Ok((hp, counter))
    }
}

/// Gradient of the misfit at `u`, using `store` for the forward trajectory.
pub fn misfit_and_gradient(
    objective: &Objective,
    u: &[f64],
    store: Box<dyn TrajectoryStore>,
) -> Result<(f64, Vec<f64>, SweepCounter, WaveLinearization)> {
    let mut lin = objective.linearize_with(u, store)?;
    let (g, c) = lin.gradient()?;
    Ok((lin.misfit(), g, lin.forward_counter() + c, lin))
}

/// Linear parameter-to-observable map `u ↦ G u` with misfit `½‖Gu − d‖²/σ²`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub forward: DMatrix<f64>,
    pub data: Vec<f64>,
    pub noise_sigma: f64,
}

impl LinearModel {
    pub fn new(forward: DMatrix<f64>, data: Vec<f64>, noise_sigma: f64) -> Result<Self> {
        check_len(forward.nrows(), data.len())?;
        if !(noise_sigma > 0.0) {
            return Err(Error::Config("noise level must be positive".into()));
        }
        Ok(Self { forward, data, noise_sigma })
    }
}

struct LinearPoint<'a> {
    model: &'a LinearModel,
    residual: DVector<f64>,
}

impl Linearization for LinearPoint<'_> {
    fn misfit(&self) -> f64 {
        0.5 * self.residual.norm_squared() / self.model.noise_sigma.powi(2)
    }

    fn forward_counter(&self) -> SweepCounter {
        SweepCounter { forward_sweeps: 1, ..Default::default() }
    }

    fn gradient(&mut self) -> Result<(Vec<f64>, SweepCounter)> {
        let g = self.model.forward.tr_mul(&self.residual) / self.model.noise_sigma.powi(2);
        Ok((g.as_slice().to_vec(), SweepCounter { adjoint_sweeps: 1, assemblies: 1, ..Default::default() }))
    }

    fn hessian_vector(&mut self, p: &[f64]) -> Result<(Vec<f64>, SweepCounter)> {
        let g = &self.model.forward;
        check_len(g.ncols(), p.len())?;
        let hp = g.tr_mul(&(g * DVector::from_column_slice(p))) / self.model.noise_sigma.powi(2);
        let c = SweepCounter { incfwd_sweeps: 1, incadj_sweeps: 1, adjoint_sweeps: 1, assemblies: 1, ..Default::default() };
        Ok((hp.as_slice().to_vec(), c))
    }
}

impl MisfitModel for LinearModel {
    fn param_dim(&self) -> usize {
        self.forward.ncols()
    }

    fn linearize<'a>(&'a self, u: &[f64]) -> Result<Box<dyn Linearization + 'a>> {
        check_len(self.forward.ncols(), u.len())?;
        let residual = &self.forward * DVector::from_column_slice(u) - DVector::from_column_slice(&self.data);
        Ok(Box::new(LinearPoint { model: self, residual }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::linalg::{dot, norm, rel_l2};
    use crate::wave::{SourceKind, SourceSpec, TimeAxis};
    use rand::Rng;

    pub(crate) fn small_problem(n: usize, steps: usize) -> (ForwardConfig, Vec<f64>) {
        let grid = Grid::new(&[n, n], 1.0 / n as f64, &[n / 2, n / 2]).unwrap();
        let nodes = grid.node_count();
        let receivers = (1..n - 1).step_by(2).map(|i| grid.index(i, n - 2)).collect();
        let config = ForwardConfig {
            grid: grid.clone(),
            density: vec![1.0; nodes],
            time: TimeAxis { dt: 0.3 / n as f64, num_steps: steps },
            sources: vec![SourceSpec {
                location: vec![0.45, 0.6],
                kind: SourceKind::Ricker,
                t_c: 0.15,
                sigma_t: 0.05,
                sigma_x: 0.08,
                direction: vec![0.3, -1.0],
            }],
            receivers,
            initial: None,
        };
        let u_true: Vec<f64> = (0..nodes)
            .map(|i| {
                let x = grid.coord(i);
                1.0 + 0.2 * (-((x[0] - 0.5).powi(2) + (x[1] - 0.4).powi(2)) / 0.02).exp()
            })
            .collect();
        (config, u_true)
    }

    fn random_field(n: usize, seed: u64, amp: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| amp * (rng.random::<f64>() - 0.5)).collect()
    }

    #[test]
    fn exact_data_at_truth_gives_zero_misfit_and_gradient() {
        let (config, u) = small_problem(8, 12);
        let obj = Objective::synthesize(config, &u, 0.0, 0).unwrap();
        let (j, g, c, _) = misfit_and_gradient(&obj, &u, Box::new(FullStore::new())).unwrap();
        assert_eq!(j, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!((c.forward_sweeps, c.adjoint_sweeps, c.recompute_sweeps), (1, 1, 0.0));
    }

    #[test]
    fn gradient_matches_central_difference() {
        let (config, u_true) = small_problem(10, 30);
        let obj = Objective::synthesize(config, &u_true, 0.0, 0).unwrap();
        let n = obj.param_dim();
        let u: Vec<f64> = vec![1.0; n].iter().zip(random_field(n, 1, 0.1)).map(|(a, b)| a + b).collect();
        let (_, g, _, _) = misfit_and_gradient(&obj, &u, Box::new(FullStore::new())).unwrap();
        let p = random_field(n, 2, 1.0);
        let eps = 1e-5;
        let j = |s: f64| {
            let up: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a + s * b).collect();
            obj.linearize_with(&up, Box::new(CheckpointStore::new(1000))).unwrap().misfit()
        };
        let fd = (j(eps) - j(-eps)) / (2.0 * eps);
        let an = dot(&g, &p);
        assert!((fd - an).abs() / an.abs() < 1e-6, "fd {fd} vs adjoint {an}");
    }

    #[test]
    fn checkpointing_gives_identical_gradient_and_exact_accounting() {
        let (config, u_true) = small_problem(8, 20);
        let obj = Objective::synthesize(config, &u_true, 0.01, 4).unwrap();
        let u = vec![1.0; obj.param_dim()];
        let (_, g_full, _, _) = misfit_and_gradient(&obj, &u, Box::new(FullStore::new())).unwrap();
        let (_, g_ck, c, mut lin) = misfit_and_gradient(&obj, &u, Box::new(CheckpointStore::new(3))).unwrap();
        assert!(rel_l2(&g_ck, &g_full) < 1e-13);
        assert_eq!(c.recompute_sweeps, 1.0);
        let (_, hc) = lin.hessian_vector(&random_field(u.len(), 3, 1.0)).unwrap();
        assert_eq!(hc.recompute_sweeps, 2.0);
        assert_eq!((hc.incfwd_sweeps, hc.incadj_sweeps), (1, 1));
    }

    #[test]
    fn hessian_matches_gradient_differences_and_is_symmetric() {
        let (config, u_true) = small_problem(8, 24);
        let obj = Objective::synthesize(config, &u_true, 0.0, 0).unwrap();
        let n = obj.param_dim();
        let u: Vec<f64> = random_field(n, 5, 0.1).iter().map(|v| 1.0 + v).collect();
        let p = random_field(n, 6, 1.0);
        let q = random_field(n, 7, 1.0);
        let mut lin = obj.linearize_with(&u, Box::new(FullStore::new())).unwrap();
        let (hp, _) = lin.hessian_vector(&p).unwrap();
        let (hq, _) = lin.hessian_vector(&q).unwrap();
        let grad_at = |s: f64| {
            let up: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a + s * b).collect();
            misfit_and_gradient(&obj, &up, Box::new(FullStore::new())).unwrap().1
        };
        let eps = 1e-5;
        let fd: Vec<f64> = grad_at(eps).iter().zip(grad_at(-eps)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        assert!(rel_l2(&fd, &hp) < 1e-5);
        let (l, r) = (dot(&hp, &q), dot(&p, &hq));
        assert!((l - r).abs() / l.abs() < 1e-8);
        let (h0, _) = lin.hessian_vector(&vec![0.0; n]).unwrap();
        assert!(norm(&h0) == 0.0);
    }

    #[test]
    fn adjoint_identity_of_linearised_map() {
        let (config, u_true) = small_problem(8, 16);
        let obj = Objective::synthesize(config, &u_true, 0.0, 0).unwrap();
        let mut lin = obj.linearize_with(&u_true, Box::new(FullStore::new())).unwrap();
        let p = random_field(obj.param_dim(), 8, 1.0);
        let w = random_field(obj.data.len(), 9, 1.0);
        let fp = lin.jacobian_apply(&p).unwrap();
        let ftw = lin.jacobian_transpose(&w).unwrap();
        let (l, r) = (dot(&fp, &w), dot(&p, &ftw));
        assert!((l - r).abs() / l.abs() < 1e-10);
    }

    #[test]
    fn linear_model_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DMatrix::from_fn(6, 4, |_, _| rng.random::<f64>());
        let model = LinearModel::new(g.clone(), vec![1.0; 6], 0.5).unwrap();
        let u = vec![0.1, 0.2, 0.3, 0.4];
        let mut lin = model.linearize(&u).unwrap();
        let (grad, _) = lin.gradient().unwrap();
        let p = vec![1.0, -1.0, 0.5, 2.0];
        let eps = 1e-6;
        let j = |s: f64| {
            let up: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a + s * b).collect();
            model.linearize(&up).unwrap().misfit()
        };
        let fd = (j(eps) - j(-eps)) / (2.0 * eps);
        assert!((fd - dot(&grad, &p)).abs() < 1e-6 * fd.abs());
    }
}
