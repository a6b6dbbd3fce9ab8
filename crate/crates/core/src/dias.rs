//! Active subspaces of the misfit gradient and the two-step refinement that
//! regularizes only the inactive complement.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::adjoint::{MisfitModel, SweepCounter};
use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, rel_l2};
use crate::newton::{solve_map, NewtonConfig, NewtonResult};
use crate::prior::{BiLaplacianPrior, Regularizer};

/// Dominant eigenpairs of the sampled gradient covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSubspaceBasis {
    /// `n × r`, orthonormal columns.
    pub vectors: DMatrix<f64>,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    pub samples: usize,
    pub center: Vec<f64>,
}

impl ActiveSubspaceBasis {
    /// Empty basis: every direction is inactive.
    pub fn empty(n: usize) -> Self {
        Self { vectors: DMatrix::zeros(n, 0), eigenvalues: vec![], samples: 0, center: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    /// `P₂ x = x − W₁(W₁ᵀx)`.
    pub fn project_inactive(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        let xv = DVector::from_column_slice(x);
        let coeff = self.vectors.tr_mul(&xv);
        Ok((xv - &self.vectors * coeff).as_slice().to_vec())
    }

    /// Dense `P₂`.
    pub fn inactive_projector(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - &self.vectors * self.vectors.transpose()
    }

    /// Basis file: magic `AEAS`, `n u64`, `r u32`, `W₁` column-major f64, then `Λ₁` f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"AEAS")?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for v in self.vectors.iter().chain(&self.eigenvalues) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| Error::Format("truncated basis header".into()))?;
        if &head[..4] != b"AEAS" {
            return Err(Error::Format("bad basis magic".into()));
        }
        let n = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
        let rank = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let vals = crate::store::spill::f64s_from_le(&bytes)?;
        check_len(n * rank + rank, vals.len())?;
        Ok(Self {
            vectors: DMatrix::from_column_slice(n, rank, &vals[..n * rank]),
            eigenvalues: vals[n * rank..].to_vec(),
            samples: 0,
            center: vec![0.0; n],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Zero-mean Gaussian perturbations of the parameter field.
pub trait PerturbationSource: Sync {
    fn dim(&self) -> usize;

    fn perturbation(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Where samples are centred when no explicit centre is given.
    fn mean(&self) -> &[f64];

    /// Lower clamp for sampled parameters, if any.
    fn floor(&self) -> Option<f64> {
        None
    }
}

impl PerturbationSource for BiLaplacianPrior {
    fn dim(&self) -> usize {
        self.grid().node_count()
    }

    fn perturbation(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.sample_perturbation(rng)
    }

    fn mean(&self) -> &[f64] {
        BiLaplacianPrior::mean(self)
    }

    fn floor(&self) -> Option<f64> {
        self.c_min()
    }
}

/// Gaussian with an explicit dense covariance.
#[derive(Debug, Clone)]
pub struct DenseGaussian {
    factor: DMatrix<f64>,
    mean: Vec<f64>,
}

impl DenseGaussian {
    pub fn new(covariance: DMatrix<f64>, mean: Vec<f64>) -> Result<Self> {
        check_len(covariance.nrows(), mean.len())?;
        let chol = covariance.cholesky().ok_or_else(|| Error::Linalg("covariance is not positive definite".into()))?;
        Ok(Self { factor: chol.l(), mean })
    }
}

impl PerturbationSource for DenseGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn perturbation(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        Ok((&self.factor * z).as_slice().to_vec())
    }

    fn mean(&self) -> &[f64] {
        &self.mean
    }
}

/// Where gradient samples are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    /// Prior draws around the prior mean.
    Prior,
    /// Prior-shaped perturbations around a given point.
    Centered(Vec<f64>),
}

/// Top-`r` eigenpairs of `(1/m) Σ gᵢgᵢᵀ` via the SVD of `[g₁ … g_m]/√m`.
pub fn basis_from_gradients(gradients: &[Vec<f64>], r: usize, center: Vec<f64>) -> Result<ActiveSubspaceBasis> {
    let m = gradients.len();
    if r > m {
        return Err(Error::Config(format!("active dimension {r} exceeds sample count {m}")));
    }
    let n = center.len();
    if m == 0 || r == 0 {
        return Ok(ActiveSubspaceBasis { samples: m, center, ..ActiveSubspaceBasis::empty(n) });
    }
    for g in gradients {
        check_len(n, g.len())?;
    }
    let scale = 1.0 / (m as f64).sqrt();
    let gmat = DMatrix::from_fn(n, m, |i, j| gradients[j][i] * scale);
    let svd = gmat.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Linalg("SVD did not return left vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let top = &order[..r];
    let vectors = DMatrix::from_fn(n, r, |i, k| u[(i, top[k])]);
    let eigenvalues = top.iter().map(|&k| svd.singular_values[k].powi(2)).collect();
    Ok(ActiveSubspaceBasis { vectors, eigenvalues, samples: m, center })
}

/// Samples `m` misfit gradients and extracts an `r`-dimensional active subspace.
/// Sample `i` uses its own seed, so results do not depend on scheduling.
pub fn estimate_active_subspace(
    model: &dyn MisfitModel,
    source: &dyn PerturbationSource,
    sampler: &Sampler,
    m: usize,
    r: usize,
    seed: u64,
) -> Result<(ActiveSubspaceBasis, SweepCounter)> {
    if r > m || m == 0 {
        return Err(Error::Config(format!("need m >= r and m >= 1, got m = {m}, r = {r}")));
    }
    let center = match sampler {
        Sampler::Prior => source.mean().to_vec(),
        Sampler::Centered(c) => c.clone(),
    };
    check_len(model.param_dim(), center.len())?;
    let results: Vec<Result<(Vec<f64>, SweepCounter)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut u = source.perturbation(&mut rng)?;
            for (v, c) in u.iter_mut().zip(&center) {
                *v += c;
            }
            if let Some(lo) = source.floor() {
                u.iter_mut().filter(|v| **v < lo).for_each(|v| *v = lo);
            }
            let mut lin = model.linearize(&u)?;
            let (g, c) = lin.gradient()?;
            Ok((g, lin.forward_counter() + c))
        })
        .collect();
    let mut gradients = Vec::with_capacity(m);
    let mut counter = SweepCounter::default();
    for res in results {
        let (g, c) = res?;
        gradients.push(g);
        counter += c;
    }
    Ok((basis_from_gradients(&gradients, r, center)?, counter))
}

/// Prior restricted to the inactive subspace, `½⟨u − u₀, P₂ R P₂ (u − u₀)⟩`.
#[derive(Clone)]
pub struct DiasRegularizer {
    pub prior: Arc<dyn Regularizer>,
    pub basis: ActiveSubspaceBasis,
    pub mean: Vec<f64>,
}

impl DiasRegularizer {
    pub fn new(prior: Arc<dyn Regularizer>, basis: ActiveSubspaceBasis, mean: Vec<f64>) -> Result<Self> {
        check_len(basis.dim(), mean.len())?;
        Ok(Self { prior, basis, mean })
    }
}

/// `P₂ R P₂ (u − u₀)`.
pub fn apply_dias_reg_grad(basis: &ActiveSubspaceBasis, prior: &dyn Regularizer, u: &[f64], u0: &[f64]) -> Result<Vec<f64>> {
    check_len(u0.len(), u.len())?;
    let du: Vec<f64> = u.iter().zip(u0).map(|(a, b)| a - b).collect();
    let inner = prior.hessian_apply(&basis.project_inactive(&du)?)?;
    basis.project_inactive(&inner)
}

impl Regularizer for DiasRegularizer {
    fn energy(&self, u: &[f64]) -> Result<f64> {
        let du: Vec<f64> = u.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let g = apply_dias_reg_grad(&self.basis, self.prior.as_ref(), u, &self.mean)?;
        Ok(0.5 * dot(&du, &g))
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        apply_dias_reg_grad(&self.basis, self.prior.as_ref(), u, &self.mean)
    }

    fn hessian_apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let inner = self.prior.hessian_apply(&self.basis.project_inactive(p)?)?;
        self.basis.project_inactive(&inner)
    }
}

/// Comparison of the exact projected-covariance inverse with its practical approximation.
#[derive(Debug, Clone)]
pub struct SchurReport {
    /// `(P₂ Γ P₂)†`.
    pub lhs: DMatrix<f64>,
    /// `P₂ Γ⁻¹ P₂`.
    pub rhs: DMatrix<f64>,
    /// Spectral norm of `lhs − rhs`.
    pub gap: f64,
    /// Relative Frobenius error of `W₂ᵀΓ⁻¹W₂ = (W₂ᵀΓW₂ − W₂ᵀΓW₁(W₁ᵀΓW₁)⁻¹W₁ᵀΓW₂)⁻¹`.
    pub schur_identity_error: f64,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Dense check of how far `P₂Γ⁻¹P₂` is from the pseudo-inverse of `P₂ΓP₂`.
pub fn verify_schur_caveat(gamma: &DMatrix<f64>, w1: &DMatrix<f64>) -> Result<SchurReport> {
    let n = gamma.nrows();
    if !gamma.is_square() || n > 200 {
        return Err(Error::Config("dense diagnostic needs a square matrix with n <= 200".into()));
    }
    check_len(n, w1.nrows())?;
    let r = w1.ncols();
    let p2 = DMatrix::identity(n, n) - w1 * w1.transpose();
    let gamma_inv = gamma.clone().try_inverse().ok_or_else(|| Error::Linalg("singular covariance".into()))?;
    let lhs = (&p2 * gamma * &p2).pseudo_inverse(1e-10).map_err(|e| Error::Linalg(e.to_string()))?;
    let rhs = &p2 * &gamma_inv * &p2;
    let gap = spectral_norm(&(&lhs - &rhs));

    let eig = SymmetricEigen::new(p2.clone());
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    if cols.len() != n - r {
        return Err(Error::Linalg("basis columns are not orthonormal".into()));
    }
    let w2 = DMatrix::from_fn(n, cols.len(), |i, k| eig.eigenvectors[(i, cols[k])]);
    let direct = w2.transpose() * &gamma_inv * &w2;
    let schur_identity_error = if r == 0 {
        rel_l2(direct.as_slice(), (w2.transpose() * gamma * &w2).try_inverse().unwrap_or(direct.clone()).as_slice())
    } else {
        let g11 = w1.transpose() * gamma * w1;
        let g12 = w1.transpose() * gamma * &w2;
        let g22 = w2.transpose() * gamma * &w2;
        let g11_inv = g11.try_inverse().ok_or_else(|| Error::Linalg("singular active block".into()))?;
        let schur = &g22 - g12.transpose() * g11_inv * &g12;
        let via_schur = schur.try_inverse().ok_or_else(|| Error::Linalg("singular Schur complement".into()))?;
        rel_l2(via_schur.as_slice(), direct.as_slice())
    };
    Ok(SchurReport { lhs, rhs, gap, schur_identity_error })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DiasConfig {
    pub samples: usize,
    pub rank: usize,
    pub seed: u64,
}

impl Default for DiasConfig {
    fn default() -> Self {
        Self { samples: 30, rank: 5, seed: 0 }
    }
}

pub struct DiasResult {
    pub map: NewtonResult,
    pub dias: NewtonResult,
    pub basis: ActiveSubspaceBasis,
    pub sampling_counter: SweepCounter,
}

impl DiasResult {
    pub fn u_map(&self) -> &[f64] {
        &self.map.u
    }

    pub fn u_dias(&self) -> &[f64] {
        &self.dias.u
    }
}

/// Two-step scheme: MAP point, active subspace centred there, then Newton-CG
/// on the misfit plus the inactive-subspace prior, started from the MAP point.
pub fn solve_dias(
    model: &dyn MisfitModel,
    prior: Arc<dyn Regularizer>,
    source: &dyn PerturbationSource,
    prior_mean: &[f64],
    u_init: &[f64],
    newton: &NewtonConfig,
    cfg: &DiasConfig,
) -> Result<DiasResult> {
    let map = solve_map(model, prior.as_ref(), u_init, newton)?;
    if cfg.rank == 0 {
        let basis = ActiveSubspaceBasis { center: map.u.clone(), ..ActiveSubspaceBasis::empty(map.u.len()) };
        let dias = map.clone();
        return Ok(DiasResult { map, dias, basis, sampling_counter: SweepCounter::default() });
    }
    let (basis, sampling_counter) =
        estimate_active_subspace(model, source, &Sampler::Centered(map.u.clone()), cfg.samples, cfg.rank, cfg.seed)?;
    let reg = DiasRegularizer::new(prior, basis.clone(), prior_mean.to_vec())?;
    let dias = solve_map(model, &reg, &map.u, newton)?;
    Ok(DiasResult { map, dias, basis, sampling_counter })
}
