//! Inexact Newton-CG for the MAP problem `min misfit(u) + reg(u)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::adjoint::{Linearization, MisfitModel, SweepCounter};
use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::prior::Regularizer;

/// Eisenstat–Walker forcing (choice 2).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Forcing {
    pub eta_max: f64,
    pub gamma: f64,
    pub exponent: f64,
}

impl Default for Forcing {
    fn default() -> Self {
        Self { eta_max: 0.5, gamma: 0.9, exponent: 2.0 }
    }
}

impl Forcing {
    fn next(&self, prev_eta: Option<f64>, gnorm: f64, prev_gnorm: f64) -> f64 {
        let Some(prev) = prev_eta else { return self.eta_max };
        let mut eta = self.gamma * (gnorm / prev_gnorm).powf(self.exponent);
        let safeguard = self.gamma * prev.powf(self.exponent);
        if safeguard > 0.1 {
            eta = eta.max(safeguard);
        }
        eta.min(self.eta_max)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub max_newton_iters: usize,
    pub cg_max_iters: usize,
    pub forcing: Forcing,
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop once `‖g‖ / ‖g₀‖` falls below this.
    pub grad_tol: f64,
    /// Lower bound enforced by projecting every trial point.
    pub c_min: Option<f64>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_newton_iters: 10,
            cg_max_iters: 50,
            forcing: Forcing::default(),
            armijo_c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            grad_tol: 1e-8,
            c_min: None,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.forcing.eta_max > 0.0
            && self.armijo_c1 > 0.0
            && self.armijo_c1 < 0.5
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.cg_max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid Newton-CG settings".into()))
        }
    }
}

/// One row of the optimisation history.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub misfit: f64,
    pub regularization: f64,
    pub grad_norm: f64,
    pub forcing: f64,
    pub cg_iters: usize,
    pub n_hvp: usize,
    pub negative_curvature: bool,
    pub step: f64,
    pub backtracks: usize,
    /// Forward sweep behind this iterate plus its gradient evaluation.
    pub grad_counter: SweepCounter,
    /// Summed over all Hessian actions of the iteration.
    pub hvp_counter: SweepCounter,
    /// Forward sweeps of rejected line-search trials.
    pub linesearch_counter: SweepCounter,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub u: Vec<f64>,
    pub objective: f64,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// The line search failed; `u` is the best iterate found.
    pub stagnated: bool,
    pub total: SweepCounter,
}

fn project(u: &mut [f64], c_min: Option<f64>) {
    if let Some(lo) = c_min {
        u.iter_mut().filter(|v| **v < lo).for_each(|v| *v = lo);
    }
}

struct Point<'a> {
    u: Vec<f64>,
    lin: Box<dyn Linearization + 'a>,
    misfit: f64,
    reg: f64,
}

impl Point<'_> {
    fn objective(&self) -> f64 {
        self.misfit + self.reg
    }
}

fn evaluate<'a>(model: &'a dyn MisfitModel, reg: &dyn Regularizer, u: Vec<f64>) -> Result<Point<'a>> {
    let lin = model.linearize(&u)?;
    let misfit = lin.misfit();
    let reg = reg.energy(&u)?;
    Ok(Point { u, lin, misfit, reg })
}

struct CgOutcome {
    step: Vec<f64>,
    iters: usize,
    n_hvp: usize,
    negative_curvature: bool,
    counter: SweepCounter,
}

/// Steihaug CG on `H d = −g` to relative residual `eta`.
fn steihaug(point: &mut Point<'_>, reg: &dyn Regularizer, g: &[f64], eta: f64, max_iters: usize) -> Result<CgOutcome> {
    let n = g.len();
    let mut d = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = eta * norm(g);
    let mut out = CgOutcome { step: vec![], iters: 0, n_hvp: 0, negative_curvature: false, counter: SweepCounter::default() };
    for it in 0..max_iters {
        let (mut hp, c) = point.lin.hessian_vector(&p)?;
        axpy(1.0, &reg.hessian_apply(&p)?, &mut hp);
        out.counter += c;
        out.n_hvp += 1;
        out.iters = it + 1;
        let php = dot(&p, &hp);
        if php <= 0.0 {
            out.negative_curvature = true;
            if it == 0 {
                d = g.iter().map(|v| -v).collect();
            }
            break;
        }
        let alpha = rr / php;
        axpy(alpha, &p, &mut d);
        axpy(-alpha, &hp, &mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            break;
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    out.step = d;
    Ok(out)
}

fn is_trial_failure(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::InvalidMedium(_))
}

/// Minimises `model` misfit plus `reg` from `u_init`.
pub fn solve_map(model: &dyn MisfitModel, reg: &dyn Regularizer, u_init: &[f64], cfg: &NewtonConfig) -> Result<NewtonResult> {
    cfg.validate()?;
    check_len(model.param_dim(), u_init.len())?;
    let mut u0 = u_init.to_vec();
    project(&mut u0, cfg.c_min);
    let mut point = evaluate(model, reg, u0)?;
    let mut history = Vec::new();
    let mut total = point.lin.forward_counter();
    let (mut g0, mut prev_g, mut prev_eta) = (None, 0.0, None);
    let (mut converged, mut stagnated) = (false, false);
    for iter in 0..cfg.max_newton_iters {
        let clock = Instant::now();
        let (mut g, gc) = point.lin.gradient()?;
        axpy(1.0, &reg.gradient(&point.u)?, &mut g);
        total += gc;
        let grad_counter = point.lin.forward_counter() + gc;
        let gnorm = norm(&g);
        let g0n = *g0.get_or_insert(gnorm);
        if gnorm == 0.0 || gnorm / g0n < cfg.grad_tol {
            converged = true;
            history.push(IterationRecord {
                iter,
                objective: point.objective(),
                misfit: point.misfit,
                regularization: point.reg,
                grad_norm: gnorm,
                forcing: 0.0,
                cg_iters: 0,
                n_hvp: 0,
                negative_curvature: false,
                step: 0.0,
                backtracks: 0,
                grad_counter,
                hvp_counter: SweepCounter::default(),
                linesearch_counter: SweepCounter::default(),
                wall_s: clock.elapsed().as_secs_f64(),
            });
            break;
        }
        let eta = cfg.forcing.next(prev_eta, gnorm, prev_g);
        let cg = steihaug(&mut point, reg, &g, eta, cfg.cg_max_iters)?;
        total += cg.counter;

        let j0 = point.objective();
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut linesearch_counter = SweepCounter::default();
        let mut backtracks = 0;
        for _ in 0..=cfg.max_backtracks {
            let mut trial: Vec<f64> = point.u.iter().zip(&cg.step).map(|(a, d)| a + alpha * d).collect();
            project(&mut trial, cfg.c_min);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&point.u)).map(|(gi, (t, u))| gi * (t - u)).sum();
            match evaluate(model, reg, trial) {
                Ok(cand) => {
                    if cand.objective() <= j0 + cfg.armijo_c1 * decrease && decrease < 0.0 {
                        accepted = Some(cand);
                        break;
                    }
                    linesearch_counter += cand.lin.forward_counter();
                }
                Err(e) if is_trial_failure(&e) => log::warn!("line-search trial rejected: {e}"),
                Err(e) => return Err(e),
            }
            alpha *= cfg.backtrack;
            backtracks += 1;
        }
        total += linesearch_counter;
        let record = IterationRecord {
            iter,
            objective: j0,
            misfit: point.misfit,
            regularization: point.reg,
            grad_norm: gnorm,
            forcing: eta,
            cg_iters: cg.iters,
            n_hvp: cg.n_hvp,
            negative_curvature: cg.negative_curvature,
            step: if accepted.is_some() { alpha } else { 0.0 },
            backtracks,
            grad_counter,
            hvp_counter: cg.counter,
            linesearch_counter,
            wall_s: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "newton {iter}: J {:.6e} |g| {gnorm:.3e} cg {} step {:.3e}",
            record.objective,
            record.cg_iters,
            record.step
        );
        history.push(record);
        match accepted {
            Some(next) => {
                total += next.lin.forward_counter();
                point = next;
            }
            None => {
                log::warn!("line search failed after {} backtracks; returning best iterate", cfg.max_backtracks);
                stagnated = true;
                break;
            }
        }
        prev_g = gnorm;
        prev_eta = Some(eta);
    }
    let objective = point.objective();
    Ok(NewtonResult { u: point.u, objective, history, converged, stagnated, total })
}

/// Writes the history as CSV, one row per Newton iteration. Wall time is left
/// out so that identical runs produce identical files.
pub fn write_history_csv(mut w: impl Write, history: &[IterationRecord]) -> Result<()> {
    writeln!(
        w,
        "iter,objective,misfit,regularization,grad_norm,forcing,cg_iters,n_hvp,negative_curvature,step,backtracks,\
         grad_fwd,grad_adj,grad_recompute,hvp_incfwd,hvp_incadj,hvp_adj,hvp_recompute,compress,decompress,linesearch_fwd"
    )?;
    for r in history {
        let (g, h, l) = (&r.grad_counter, &r.hvp_counter, &r.linesearch_counter);
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e},{},{},{},{:e},{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.objective,
            r.misfit,
            r.regularization,
            r.grad_norm,
            r.forcing,
            r.cg_iters,
            r.n_hvp,
            r.negative_curvature,
            r.step,
            r.backtracks,
            g.forward_sweeps,
            g.adjoint_sweeps,
            g.recompute_sweeps,
            h.incfwd_sweeps,
            h.incadj_sweeps,
            h.adjoint_sweeps,
            h.recompute_sweeps,
            g.compress_calls + h.compress_calls + l.compress_calls,
            g.decompress_calls + h.decompress_calls,
            l.forward_sweeps
        )?;
    }
    Ok(())
}

const FIELD_MAGIC: &[u8; 4] = b"AEFD";
const FIELD_VERSION: u32 = 1;

/// Writes a field file: magic `AEFD`, version `u32`, axis count `u32`, each
/// axis length as `u64`, then the values as little-endian f64.
pub fn write_field(mut w: impl Write, dims: &[usize], values: &[f64]) -> Result<()> {
    check_len(dims.iter().product(), values.len())?;
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&FIELD_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field(mut r: impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated field header".into()))?;
    if &head[..4] != FIELD_MAGIC || u32::from_le_bytes(head[4..8].try_into().unwrap()) != FIELD_VERSION {
        return Err(Error::Format("not a field file".into()));
    }
    let ndims = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if ndims > 8 {
        return Err(Error::Format("implausible axis count".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated field header".into()))?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let values = crate::store::spill::f64s_from_le(&bytes)?;
    check_len(dims.iter().product(), values.len())?;
    Ok((dims, values))
}

pub fn save_field(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    write_field(BufWriter::new(File::create(path)?), dims, values)
}

pub fn load_field(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    read_field(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::LinearModel;
    use crate::linalg::rel_l2;
    use crate::prior::DenseRegularizer;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> (LinearModel, DenseRegularizer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(12, 8, |_, _| rng.random::<f64>() - 0.5);
        let d: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let r = DMatrix::from_fn(8, 8, |i, j| if i == j { 0.5 } else { 0.0 });
        (LinearModel::new(g, d, 0.3).unwrap(), DenseRegularizer::new(r, vec![0.2; 8]).unwrap())
    }

    #[test]
    fn quadratic_converges_to_tikhonov_solution() {
        let (model, reg) = toy(1);
        let s2 = 0.09;
        let h = model.forward.tr_mul(&model.forward) / s2 + &reg.precision;
        let rhs = model.forward.tr_mul(&DVector::from_vec(model.data.clone())) / s2
            + &reg.precision * DVector::from_vec(reg.mean.clone());
        let exact = h.lu().solve(&rhs).unwrap();
        let cfg = NewtonConfig {
            forcing: Forcing { eta_max: 1e-14, ..Default::default() },
            grad_tol: 1e-10,
            ..Default::default()
        };
        let res = solve_map(&model, &reg, &[1.0; 8], &cfg).unwrap();
        assert!(res.converged);
        assert!(res.history.iter().filter(|r| r.step > 0.0).count() <= 2);
        assert!(rel_l2(&res.u, exact.as_slice()) < 1e-8);
        for w in res.history.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn zero_residual_returns_immediately() {
        let (mut model, _) = toy(2);
        let u0 = vec![0.3; 8];
        model.data = (&model.forward * DVector::from_vec(u0.clone())).as_slice().to_vec();
        let reg = DenseRegularizer::new(DMatrix::identity(8, 8), u0.clone()).unwrap();
        let res = solve_map(&model, &reg, &u0, &NewtonConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.u, u0);
        assert_eq!(res.history.len(), 1);
        assert_eq!(res.history[0].grad_norm, 0.0);
    }

    #[test]
    fn projection_respects_lower_bound() {
        let (model, reg) = toy(3);
        let cfg = NewtonConfig { c_min: Some(0.25), max_newton_iters: 4, ..Default::default() };
        let res = solve_map(&model, &reg, &[1.0; 8], &cfg).unwrap();
        assert!(res.u.iter().all(|v| *v >= 0.25));
    }

    #[test]
    fn history_csv_has_one_row_per_iteration() {
        let (model, reg) = toy(4);
        let res = solve_map(&model, &reg, &[1.0; 8], &NewtonConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &res.history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), res.history.len() + 1);
    }

    #[test]
    fn field_file_round_trip() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let mut buf = Vec::new();
        write_field(&mut buf, &[4, 3], &vals).unwrap();
        let (dims, back) = read_field(buf.as_slice()).unwrap();
        assert_eq!(dims, vec![4, 3]);
        assert_eq!(back, vals);
        assert!(read_field(&buf[..buf.len() - 3]).is_err());
    }
}
