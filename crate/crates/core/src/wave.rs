//! Velocity–dilatation acoustic wave system on uniform grids, integrated with classical RK4.
//!
//! The semi-discrete system is `ẏ = A(c) y + s(t)` with
//!
//! ```text
//! ∂v_a/∂t = ρ⁻¹ G_a P (ρc² e) + g_a/ρ
//! ∂e/∂t   = P Σ_a G_a v_a
//! ```
//!
//! where `G_a` is the centred difference along axis `a` with zero extension
//! outside the domain (a skew-symmetric matrix) and `P` zeroes boundary
//! nodes, which holds `e = 0` on the boundary. Because `G_aᵀ = −G_a`, the
//! discrete energy `Σ ρ|v|² + ρc²e²` is conserved by the semi-discrete system.

use std::sync::Arc;

use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::store::{StageKey, StageReplay, TrajectoryStore};

pub const RK_STAGES: usize = 4;

/// Density and wavespeed at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Medium {
    pub density: Vec<f64>,
    pub wavespeed: Vec<f64>,
}

impl Medium {
    pub fn uniform(grid: &Grid, density: f64, wavespeed: f64) -> Self {
        let n = grid.node_count();
        Self { density: vec![density; n], wavespeed: vec![wavespeed; n] }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        check_len(grid.node_count(), self.density.len())?;
        check_len(grid.node_count(), self.wavespeed.len())?;
        validate_positive("density", &self.density)?;
        validate_positive("wavespeed", &self.wavespeed)
    }
}

fn validate_positive(what: &str, field: &[f64]) -> Result<()> {
    match field.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
        Some(i) => Err(Error::InvalidMedium(format!("{what} at node {i} is {}, must be positive", field[i]))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Ricker wavelet in time, narrow Gaussian in space.
    Ricker,
    /// Gaussian in time, discrete delta at the nearest node.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SourceSpec {
    pub location: Vec<f64>,
    pub kind: SourceKind,
    pub t_c: f64,
    pub sigma_t: f64,
    #[serde(default = "default_sigma_x")]
    pub sigma_x: f64,
    /// Force direction; normalised on use.
    pub direction: Vec<f64>,
}

fn default_sigma_x() -> f64 {
    0.05
}

impl SourceSpec {
    fn validate(&self, grid: &Grid) -> Result<()> {
        if !grid.contains(&self.location) {
            return Err(Error::Config(format!("source at {:?} lies outside the domain", self.location)));
        }
        if !(self.sigma_t > 0.0) || !(self.sigma_x > 0.0) {
            return Err(Error::Config("source widths must be positive".into()));
        }
        if self.direction.len() != grid.dim() || self.direction.iter().all(|&d| d == 0.0) {
            return Err(Error::Config("source direction must be a nonzero vector with one entry per axis".into()));
        }
        Ok(())
    }

    /// Source time function.
    pub fn time_function(&self, t: f64) -> f64 {
        let tau = t - self.t_c;
        let s2 = self.sigma_t * self.sigma_t;
        match self.kind {
            SourceKind::Ricker => (1.0 - tau * tau / s2) * (-tau * tau / (2.0 * s2)).exp(),
            SourceKind::Gaussian => {
                (-tau * tau / (2.0 * s2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * self.sigma_t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAxis {
    pub dt: f64,
    pub num_steps: usize,
}

impl TimeAxis {
    pub fn final_time(&self) -> f64 {
        self.dt * self.num_steps as f64
    }
}

/// Largest stable RK4 timestep scaled by `safety`: `safety · h / (√d · max c)`.
pub fn cfl_dt(grid: &Grid, medium: &Medium, safety: f64) -> Result<f64> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Config(format!("CFL safety factor must lie in (0, 1], got {safety}")));
    }
    medium.validate(grid)?;
    let cmax = medium.wavespeed.iter().cloned().fold(0.0, f64::max);
    Ok(safety * grid.spacing() / ((grid.dim() as f64).sqrt() * cmax))
}

/// Everything that defines one forward problem except the wavespeed.
#[derive(Debug, Clone)]
pub struct ForwardConfig {
    pub grid: Grid,
    pub density: Vec<f64>,
    pub time: TimeAxis,
    pub sources: Vec<SourceSpec>,
    /// Receiver node indices; each records every velocity component.
    pub receivers: Vec<usize>,
    /// Optional non-zero initial state `(v₀, e₀)`.
    pub initial: Option<Vec<f64>>,
}

impl ForwardConfig {
    pub fn state_len(&self) -> usize {
        (self.grid.dim() + 1) * self.grid.node_count()
    }

    pub fn obs_per_step(&self) -> usize {
        self.receivers.len() * self.grid.dim()
    }

    pub fn obs_len(&self) -> usize {
        self.obs_per_step() * self.time.num_steps
    }
}

/// Applies the centred difference along `axis` (zero extension) and adds `scale · G f` into `out`.
pub(crate) fn add_centered_diff(grid: &Grid, axis: usize, f: &[f64], scale: f64, out: &mut [f64]) {
    let [n0, n1] = grid.shape2();
    let c = scale / (2.0 * grid.spacing());
    if axis == 0 {
        for j in 0..n1 {
            let row = &f[j * n0..(j + 1) * n0];
            let o = &mut out[j * n0..(j + 1) * n0];
            o[0] += c * row[1];
            for i in 1..n0 - 1 {
                o[i] += c * (row[i + 1] - row[i - 1]);
            }
            o[n0 - 1] -= c * row[n0 - 2];
        }
    } else {
        for i in 0..n0 {
            out[i] += c * f[n0 + i];
        }
        for j in 1..n1 - 1 {
            let (lo, hi) = ((j - 1) * n0, (j + 1) * n0);
            for i in 0..n0 {
                out[j * n0 + i] += c * (f[hi + i] - f[lo + i]);
            }
        }
        let last = (n1 - 1) * n0;
        for i in 0..n0 {
            out[last + i] -= c * f[last - n0 + i];
        }
    }
}

/// Discrete wave operator bound to one wavespeed field.
pub struct WaveModel {
    grid: Grid,
    dim: usize,
    nodes: usize,
    rho: Vec<f64>,
    inv_rho: Vec<f64>,
    c: Vec<f64>,
    kappa: Vec<f64>,
    mask: Vec<f64>,
    sources: Vec<(SourceSpec, Vec<f64>)>,
    receivers: Vec<usize>,
    time: TimeAxis,
    initial: Option<Vec<f64>>,
}

impl WaveModel {
    pub fn new(wavespeed: &[f64], config: &ForwardConfig) -> Result<Self> {
        let grid = config.grid.clone();
        let n = grid.node_count();
        check_len(n, config.density.len())?;
        check_len(n, wavespeed.len())?;
        validate_positive("density", &config.density)?;
        validate_positive("wavespeed", wavespeed)?;
        if !(config.time.dt > 0.0) {
            return Err(Error::Config("timestep must be positive".into()));
        }
        if let Some(init) = &config.initial {
            check_len(config.state_len(), init.len())?;
        }
        if let Some(&r) = config.receivers.iter().find(|&&r| r >= n) {
            return Err(Error::Config(format!("receiver node {r} out of range")));
        }
        let rho = config.density.clone();
        let inv_rho = rho.iter().map(|r| 1.0 / r).collect();
        let kappa = rho.iter().zip(wavespeed).map(|(r, c)| r * c * c).collect();
        let mask = grid.interior_mask();
        let mut sources = Vec::with_capacity(config.sources.len());
        for s in &config.sources {
            s.validate(&grid)?;
            let profile = source_profile(&grid, &rho, s)?;
            sources.push((s.clone(), profile));
        }
        Ok(Self {
            dim: grid.dim(),
            nodes: n,
            grid,
            rho,
            inv_rho,
            c: wavespeed.to_vec(),
            kappa,
            mask,
            sources,
            receivers: config.receivers.clone(),
            time: config.time,
            initial: config.initial.clone(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time(&self) -> TimeAxis {
        self.time
    }

    pub fn state_len(&self) -> usize {
        (self.dim + 1) * self.nodes
    }

    pub fn obs_per_step(&self) -> usize {
        self.receivers.len() * self.dim
    }

    fn e_range(&self) -> std::ops::Range<usize> {
        self.dim * self.nodes..(self.dim + 1) * self.nodes
    }

    /// `out = A y`.
    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        let n = self.nodes;
        out.fill(0.0);
        let e = &y[self.e_range()];
        let pk: Vec<f64> = (0..n).map(|i| self.mask[i] * self.kappa[i] * e[i]).collect();
        for a in 0..self.dim {
            let o = &mut out[a * n..(a + 1) * n];
            add_centered_diff(&self.grid, a, &pk, 1.0, o);
            for (oi, ir) in o.iter_mut().zip(&self.inv_rho) {
                *oi *= ir;
            }
        }
        let epart = &mut out[self.e_range()];
        for a in 0..self.dim {
            add_centered_diff(&self.grid, a, &y[a * n..(a + 1) * n], 1.0, epart);
        }
        for (oi, m) in epart.iter_mut().zip(&self.mask) {
            *oi *= m;
        }
    }

    /// `w = −P Σ_a G_a (ρ⁻¹ λ_a)`, the shared factor of the transpose and parameter derivative.
    fn transpose_kernel(&self, lam: &[f64]) -> Vec<f64> {
        let n = self.nodes;
        let mut w = vec![0.0; n];
        let mut scaled = vec![0.0; n];
        for a in 0..self.dim {
            for i in 0..n {
                scaled[i] = self.inv_rho[i] * lam[a * n + i];
            }
            add_centered_diff(&self.grid, a, &scaled, -1.0, &mut w);
        }
        for (wi, m) in w.iter_mut().zip(&self.mask) {
            *wi *= m;
        }
        w
    }

    /// `out = Aᵀ λ`. Also returns the kernel `w` used for parameter sensitivities.
    pub fn apply_transpose(&self, lam: &[f64], out: &mut [f64]) -> Vec<f64> {
        let n = self.nodes;
        out.fill(0.0);
        let le: Vec<f64> = lam[self.e_range()].iter().zip(&self.mask).map(|(l, m)| l * m).collect();
        for a in 0..self.dim {
            add_centered_diff(&self.grid, a, &le, -1.0, &mut out[a * n..(a + 1) * n]);
        }
        let w = self.transpose_kernel(lam);
        let er = self.e_range();
        for (i, o) in out[er].iter_mut().enumerate() {
            *o = self.kappa[i] * w[i];
        }
        w
    }

    /// Adds `(∂_c (A y)) p` into `out`.
    pub fn add_param_derivative(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        let n = self.nodes;
        let e = &y[self.e_range()];
        let q: Vec<f64> = (0..n).map(|i| self.mask[i] * 2.0 * self.rho[i] * self.c[i] * p[i] * e[i]).collect();
        let mut tmp = vec![0.0; n];
        for a in 0..self.dim {
            tmp.fill(0.0);
            add_centered_diff(&self.grid, a, &q, 1.0, &mut tmp);
            for i in 0..n {
                out[a * n + i] += self.inv_rho[i] * tmp[i];
            }
        }
    }

    /// Adds `scale · (∂_c (A y))ᵀ λ` into `grad`, given the kernel `w` of `λ`.
    pub fn add_param_sensitivity(&self, y: &[f64], w: &[f64], scale: f64, grad: &mut [f64]) {
        let e = &y[self.e_range()];
        for i in 0..self.nodes {
            grad[i] += scale * 2.0 * self.rho[i] * self.c[i] * e[i] * w[i];
        }
    }

    /// Adds `scale · (∂_c (∂_c (A y))ᵀ λ) p`: the sensitivity term's own dependence on `c`.
    pub fn add_param_sensitivity_curvature(&self, y: &[f64], w: &[f64], p: &[f64], scale: f64, grad: &mut [f64]) {
        let e = &y[self.e_range()];
        for i in 0..self.nodes {
            grad[i] += scale * 2.0 * self.rho[i] * p[i] * e[i] * w[i];
        }
    }

    /// Adds `scale · (∂_c Aᵀ λ) p`, the parameter derivative of the transpose (e-block only).
    pub fn add_transpose_param_derivative(&self, w: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
        let er = self.e_range();
        for (i, o) in out[er].iter_mut().enumerate() {
            *o += scale * 2.0 * self.rho[i] * self.c[i] * p[i] * w[i];
        }
    }

    /// Adds the source term `s(t)` into `out`.
    pub fn add_source(&self, t: f64, out: &mut [f64]) {
        let n = self.nodes;
        for (spec, profile) in &self.sources {
            let amp = spec.time_function(t);
            if amp == 0.0 {
                continue;
            }
            let dnorm = spec.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
            for a in 0..self.dim {
                let s = amp * spec.direction[a] / dnorm;
                if s == 0.0 {
                    continue;
                }
                for i in 0..n {
                    out[a * n + i] += s * profile[i];
                }
            }
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match &self.initial {
            Some(init) => {
                let mut y = init.clone();
                let er = self.e_range();
                for (v, m) in y[er].iter_mut().zip(&self.mask) {
                    *v *= m;
                }
                y
            }
            None => vec![0.0; self.state_len()],
        }
    }

    /// Appends the receiver samples `B y` to `obs`.
    pub fn observe(&self, y: &[f64], obs: &mut Vec<f64>) {
        for &r in &self.receivers {
            for a in 0..self.dim {
                obs.push(y[a * self.nodes + r]);
            }
        }
    }

    /// Adds `scale · Bᵀ r` into the velocity block of `out`.
    pub fn add_observation_transpose(&self, r: &[f64], scale: f64, out: &mut [f64]) {
        for (k, &node) in self.receivers.iter().enumerate() {
            for a in 0..self.dim {
                out[a * self.nodes + node] += scale * r[k * self.dim + a];
            }
        }
    }

    /// Advances the step-boundary state `y` from step `n` to `n + 1`, emitting the four
    /// RK stage states `Y₁ = yₙ, Y₂ = yₙ + ½Δt k₁, Y₃ = yₙ + ½Δt k₂, Y₄ = yₙ + Δt k₃`.
    pub fn step(
        &self,
        n: usize,
        y: &mut [f64],
        emit: &mut dyn FnMut(usize, &[f64]) -> Result<()>,
    ) -> Result<()> {
        let dt = self.time.dt;
        let t = n as f64 * dt;
        let len = y.len();
        let mut stage = vec![0.0; len];
        let mut k = vec![0.0; len];
        let mut acc = vec![0.0; len];
        let offsets = [0.0, 0.5 * dt, 0.5 * dt, dt];
        let weights = [1.0, 2.0, 2.0, 1.0];
        stage.copy_from_slice(y);
        for s in 0..RK_STAGES {
            emit(s, &stage)?;
            self.apply(&stage, &mut k);
            self.add_source(t + offsets[s], &mut k);
            for (a, ki) in acc.iter_mut().zip(&k) {
                *a += weights[s] * ki;
            }
            if s + 1 < RK_STAGES {
                let h = offsets[s + 1];
                for i in 0..len {
                    stage[i] = y[i] + h * k[i];
                }
            }
        }
        for (yi, a) in y.iter_mut().zip(&acc) {
            *yi += dt / 6.0 * a;
        }
        Ok(())
    }
}

impl StageReplay for WaveModel {
    fn state_len(&self) -> usize {
        WaveModel::state_len(self)
    }

    fn replay_step(&self, step: usize, state: &mut [f64], emit: &mut dyn FnMut(usize, &[f64])) {
        // Same arithmetic as the original sweep, so replayed stages are bit-identical.
        let _ = self.step(step, state, &mut |s, st| {
            emit(s, st);
            Ok(())
        });
    }
}

fn source_profile(grid: &Grid, rho: &[f64], s: &SourceSpec) -> Result<Vec<f64>> {
    let n = grid.node_count();
    let mut profile = vec![0.0; n];
    match s.kind {
        SourceKind::Ricker => {
            // g includes a factor ρ(x), which cancels against the 1/ρ of the momentum equation.
            let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * s.sigma_x);
            for (i, p) in profile.iter_mut().enumerate() {
                let x = grid.coord(i);
                let d2: f64 = (0..grid.dim()).map(|a| (x[a] - s.location[a]).powi(2)).sum();
                *p = norm * (-d2 / (2.0 * s.sigma_x * s.sigma_x)).exp();
            }
        }
        SourceKind::Gaussian => {
            let i = grid.nearest_node(&s.location)?;
            profile[i] = 1.0 / (grid.cell_volume() * rho[i]);
        }
    }
    Ok(profile)
}

/// Time derivative `(∂v/∂t, ∂e/∂t)` of `state` at time `t`.
pub fn rhs(state: &[f64], medium: &Medium, grid: &Grid, t: f64, sources: &[SourceSpec]) -> Result<Vec<f64>> {
    let config = ForwardConfig {
        grid: grid.clone(),
        density: medium.density.clone(),
        time: TimeAxis { dt: 1.0, num_steps: 1 },
        sources: sources.to_vec(),
        receivers: Vec::new(),
        initial: None,
    };
    check_len(config.state_len(), state.len())?;
    let model = WaveModel::new(&medium.wavespeed, &config)?;
    let mut out = vec![0.0; state.len()];
    model.apply(state, &mut out);
    model.add_source(t, &mut out);
    Ok(out)
}

/// Result of one forward sweep.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Receiver samples after each step, `num_steps × obs_per_step`, step-major.
    pub observations: Vec<f64>,
    pub final_state: Vec<f64>,
}

/// Integrates the wave system for wavespeed `u`, submitting every RK stage state to `store`.
pub fn forward_solve(u: &[f64], config: &ForwardConfig, store: &mut dyn TrajectoryStore) -> Result<ForwardOutput> {
    let model = Arc::new(WaveModel::new(u, config)?);
    forward_with_model(&model, store)
}

pub(crate) fn forward_with_model(model: &Arc<WaveModel>, store: &mut dyn TrajectoryStore) -> Result<ForwardOutput> {
    if !store.is_empty() {
        return Err(Error::Storage("forward sweep requires an empty store".into()));
    }
    store.bind_replay(model.clone());
    let mut y = model.initial_state();
    let steps = model.time.num_steps;
    let mut observations = Vec::with_capacity(steps * model.obs_per_step());
    for n in 0..steps {
        model.step(n, &mut y, &mut |s, st| store.put(StageKey::new(n, s), st))?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: n });
        }
        model.observe(&y, &mut observations);
    }
    store.finish()?;
    Ok(ForwardOutput { observations, final_state: y })
}

/// Discrete energy `½ Σ (ρ|v|² + ρc²e²) hᵈ`.
pub fn energy(grid: &Grid, medium: &Medium, state: &[f64]) -> f64 {
    let n = grid.node_count();
    let d = grid.dim();
    let mut e = 0.0;
    for i in 0..n {
        let rho = medium.density[i];
        let c = medium.wavespeed[i];
        let v2: f64 = (0..d).map(|a| state[a * n + i].powi(2)).sum();
        e += rho * v2 + rho * c * c * state[d * n + i].powi(2);
    }
    0.5 * e * grid.cell_volume()
}
