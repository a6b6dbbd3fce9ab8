//! Quick numerical self-checks run from the command line.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{misfit_and_gradient, Linearization, SweepCounter};
use crate::bench::{modeled_speedup, SweepWeights};
use crate::config::RunConfig;
use crate::dias::verify_schur_caveat;
use crate::error::Result;
use crate::linalg::{dot, norm};
use crate::quant::{q_decode, q_encode, QuantizerConfig};
use crate::store::{CheckpointStore, FullStore};

#[derive(Debug, Clone, serde::Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Runs every check; errors inside a check count as failures.
pub fn run(seed: u64) -> Vec<Check> {
    type Probe = fn(u64) -> Result<Check>;
    let probes: [(&'static str, Probe); 5] = [
        ("gradient", gradient),
        ("hessian", hessian),
        ("quantizer", quantizer),
        ("speedup", speedup),
        ("schur", schur),
    ];
    probes
        .iter()
        .map(|(name, f)| f(seed).unwrap_or_else(|e| check(name, false, e.to_string())))
        .collect()
}

fn small() -> Result<crate::config::Problem> {
    let mut cfg = RunConfig::desk();
    cfg.grid.cells = vec![16, 16];
    cfg.time.final_time = 0.4;
    cfg.data.noise_fraction = 0.0;
    for s in &mut cfg.sources {
        s.t_c = 0.15;
        s.sigma_t = 0.05;
    }
    cfg.build()
}

fn direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

fn gradient(seed: u64) -> Result<Check> {
    let p = small()?;
    let u: Vec<f64> = p.initial_guess().iter().map(|c| c + 0.05).collect();
    let (_, g, _, _) = misfit_and_gradient(&p.objective, &u, Box::new(FullStore::new()))?;
    let dir = direction(u.len(), seed);
    let eps = 1e-5;
    let at = |s: f64| -> Result<f64> {
        let v: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
        Ok(p.objective.linearize_with(&v, Box::new(FullStore::new()))?.misfit())
    };
    let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
    let ad = dot(&g, &dir);
    let rel = (fd - ad).abs() / ad.abs().max(f64::MIN_POSITIVE);
    Ok(check("gradient", rel < 1e-6, format!("directional derivative relative error {rel:.2e}")))
}

fn hessian(seed: u64) -> Result<Check> {
    let p = small()?;
    let u: Vec<f64> = p.initial_guess().iter().map(|c| c + 0.05).collect();
    let (_, _, _, mut lin) =
        misfit_and_gradient(&p.objective, &u, Box::new(CheckpointStore::new(CheckpointStore::default_interval(p.forward.time.num_steps))))?;
    let (a, b) = (direction(u.len(), seed), direction(u.len(), seed + 1));
    let (ha, ca) = lin.hessian_vector(&a)?;
    let (hb, _) = lin.hessian_vector(&b)?;
    let (l, r) = (dot(&ha, &b), dot(&a, &hb));
    let sym = (l - r).abs() / l.abs().max(r.abs());
    let counts_ok = ca == SweepCounter { incfwd_sweeps: 1, incadj_sweeps: 1, adjoint_sweeps: 1, assemblies: 1, recompute_sweeps: 2.0, ..ca };
    Ok(check("hessian", sym < 1e-8 && counts_ok, format!("symmetry error {sym:.2e}, recompute {} sweeps", ca.recompute_sweeps)))
}

fn quantizer(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QuantizerConfig::new(1e-3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let y: Vec<f64> = (0..256).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let back = q_decode(&q_encode(&y, &cfg)?, &cfg)?;
        worst = y.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(check("quantizer", worst <= 1e-3, format!("worst elementwise error {worst:.3e}")))
}

fn speedup(_: u64) -> Result<Check> {
    let w = SweepWeights::default();
    let base = SweepCounter { forward_sweeps: 1, adjoint_sweeps: 1, assemblies: 1, ..Default::default() };
    let grad = modeled_speedup(&SweepCounter { recompute_sweeps: 1.0, ..base }, &base, &w)?;
    let hbase = SweepCounter { incfwd_sweeps: 1, incadj_sweeps: 1, adjoint_sweeps: 1, assemblies: 1, ..Default::default() };
    let hvp = modeled_speedup(&SweepCounter { recompute_sweeps: 2.0, ..hbase }, &hbase, &w)?;
    Ok(check("speedup", grad == 4.0 / 3.0 && hvp == 1.5, format!("gradient {grad:.4}, Hessian action {hvp:.4}")))
}

fn schur(_: u64) -> Result<Check> {
    let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0]));
    let w = DMatrix::from_column_slice(2, 1, &[0.5f64.sqrt(), 0.5f64.sqrt()]);
    let aniso = verify_schur_caveat(&g, &w)?;
    let iso = verify_schur_caveat(&(DMatrix::identity(2, 2) * 3.0), &w)?;
    let ok = aniso.gap > 0.1 && iso.gap < 1e-12 && norm(aniso.lhs.as_slice()) > 0.0;
    Ok(check("schur", ok, format!("anisotropic gap {:.4}, isotropic gap {:.1e}", aniso.gap, iso.gap)))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
