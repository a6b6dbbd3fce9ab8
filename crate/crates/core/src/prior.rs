//! Gaussian priors on the wavespeed field and the regularizer interface.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::linalg::{conjugate_gradient, dot};

const CG_TOL: f64 = 1e-10;

/// Quadratic penalty `½⟨u − m, R(u − m)⟩` added to the data misfit.
pub trait Regularizer: Send + Sync {
    fn energy(&self, u: &[f64]) -> Result<f64>;

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>>;

    /// Applies the (constant) Hessian `R`.
    fn hessian_apply(&self, p: &[f64]) -> Result<Vec<f64>>;
}

/// Squared elliptic operator prior with Neumann boundaries.
///
/// With `A = α(−θΔ + I)` the precision is `h^d A²`, the covariance of the
/// mass-lumped white-noise draw `u₀ + A⁻¹ w / h^{d/2}`.
#[derive(Debug, Clone)]
pub struct BiLaplacianPrior {
    grid: Grid,
    alpha: f64,
    theta: f64,
    mean: Vec<f64>,
    c_min: Option<f64>,
}

impl BiLaplacianPrior {
    pub fn new(grid: Grid, alpha: f64, theta: f64, mean: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0 && theta >= 0.0 && alpha.is_finite() && theta.is_finite()) {
            return Err(Error::Config(format!("prior needs alpha > 0 and theta >= 0, got {alpha}, {theta}")));
        }
        check_len(grid.node_count(), mean.len())?;
        Ok(Self { grid, alpha, theta, mean, c_min: None })
    }

    /// Lower clamp applied to draws from [`Self::sample`].
    pub fn with_c_min(mut self, c_min: f64) -> Self {
        self.c_min = Some(c_min);
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn c_min(&self) -> Option<f64> {
        self.c_min
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `A w`.
    pub fn apply_operator(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len(self.grid.node_count(), w.len())?;
        let [n0, n1] = self.grid.shape2();
        let inv_h2 = 1.0 / (self.grid.spacing() * self.grid.spacing());
        let mut out: Vec<f64> = w.to_vec();
        if self.theta > 0.0 {
            let k = self.theta * inv_h2;
            for i1 in 0..n1 {
                for i0 in 0..n0 {
                    let i = self.grid.index(i0, i1);
                    let mut lap = 0.0;
                    if i0 > 0 {
                        lap += w[i] - w[i - 1];
                    }
                    if i0 + 1 < n0 {
                        lap += w[i] - w[i + 1];
                    }
                    if self.grid.dim() == 2 {
                        if i1 > 0 {
                            lap += w[i] - w[i - n0];
                        }
                        if i1 + 1 < n1 {
                            lap += w[i] - w[i + n0];
                        }
                    }
                    out[i] += k * lap;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= self.alpha);
        Ok(out)
    }

    /// `A⁻¹ w` by conjugate gradients.
    pub fn solve_operator(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len(self.grid.node_count(), w.len())?;
        let apply = |x: &[f64]| self.apply_operator(x).expect("length checked");
        Ok(conjugate_gradient(apply, w, CG_TOL, self.grid.node_count().max(50))?.0)
    }

    pub fn apply_precision(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mass = self.grid.cell_volume();
        let mut out = self.apply_operator(&self.apply_operator(w)?)?;
        out.iter_mut().for_each(|v| *v *= mass);
        Ok(out)
    }

    pub fn apply_covariance(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mass = self.grid.cell_volume();
        let mut out = self.solve_operator(&self.solve_operator(w)?)?;
        out.iter_mut().for_each(|v| *v /= mass);
        Ok(out)
    }

    /// Zero-mean draw `A⁻¹ w / h^{d/2}` with `w` standard normal per node.
    pub fn sample_perturbation(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let w: Vec<f64> = (0..self.grid.node_count()).map(|_| StandardNormal.sample(rng)).collect();
        let mut x = self.solve_operator(&w)?;
        let s = self.grid.cell_volume().sqrt();
        x.iter_mut().for_each(|v| *v /= s);
        Ok(x)
    }

    /// Prior draw around `center`, clamped below at `c_min` when set.
    pub fn sample_around(&self, center: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        check_len(self.grid.node_count(), center.len())?;
        let mut u = self.sample_perturbation(rng)?;
        for (v, c) in u.iter_mut().zip(center) {
            *v += c;
        }
        if let Some(c_min) = self.c_min {
            let clamped = u.iter_mut().filter(|v| **v < c_min).map(|v| *v = c_min).count();
            if clamped > 0 {
                log::info!("prior draw clamped at {clamped} nodes to c_min = {c_min}");
            }
        }
        Ok(u)
    }

    pub fn sample(&self, seed: u64) -> Result<Vec<f64>> {
        self.sample_around(&self.mean, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Dense covariance by columns; for small diagnostic grids only.
    pub fn dense_covariance(&self) -> Result<DMatrix<f64>> {
        let n = self.grid.node_count();
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            a.set_column(j, &DVector::from_vec(self.apply_operator(&e)?));
        }
        let ainv = a.try_inverse().ok_or_else(|| Error::Linalg("singular prior operator".into()))?;
        Ok(&ainv * &ainv / self.grid.cell_volume())
    }
}

impl Regularizer for BiLaplacianPrior {
    fn energy(&self, u: &[f64]) -> Result<f64> {
        check_len(self.mean.len(), u.len())?;
        let du: Vec<f64> = u.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(0.5 * dot(&du, &self.apply_precision(&du)?))
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(self.mean.len(), u.len())?;
        let du: Vec<f64> = u.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.apply_precision(&du)
    }

    fn hessian_apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.apply_precision(p)
    }
}

/// Regularizer with an explicit dense precision matrix.
#[derive(Debug, Clone)]
pub struct DenseRegularizer {
    pub precision: DMatrix<f64>,
    pub mean: Vec<f64>,
}

impl DenseRegularizer {
    pub fn new(precision: DMatrix<f64>, mean: Vec<f64>) -> Result<Self> {
        if !precision.is_square() {
            return Err(Error::Shape { expected: precision.nrows(), got: precision.ncols() });
        }
        check_len(precision.nrows(), mean.len())?;
        Ok(Self { precision, mean })
    }

    fn mul(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len(self.mean.len(), p.len())?;
        Ok((&self.precision * DVector::from_column_slice(p)).as_slice().to_vec())
    }
}

impl Regularizer for DenseRegularizer {
    fn energy(&self, u: &[f64]) -> Result<f64> {
        check_len(self.mean.len(), u.len())?;
        let du: Vec<f64> = u.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(0.5 * dot(&du, &self.mul(&du)?))
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(self.mean.len(), u.len())?;
        let du: Vec<f64> = u.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.mul(&du)
    }

    fn hessian_apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.mul(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_l2;
    use proptest::prelude::*;
    use rand::Rng;

    fn prior(n: usize, h: f64, alpha: f64, theta: f64) -> BiLaplacianPrior {
        let g = Grid::new(&[n, n], h, &[n, n]).unwrap();
        BiLaplacianPrior::new(g, alpha, theta, vec![1.0; n * n]).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn zero_maps_to_zero() {
        let p = prior(16, 1.0 / 16.0, 2.0, 0.1);
        assert!(p.apply_precision(&[0.0; 256]).unwrap().iter().all(|v| *v == 0.0));
        assert!(p.apply_covariance(&[0.0; 256]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vanishing_stiffness_is_scaled_identity() {
        let p = prior(8, 1.0, 3.0, 0.0);
        let w = random(64, 1);
        for (a, b) in p.apply_precision(&w).unwrap().iter().zip(&w) {
            assert!((a - 9.0 * b).abs() < 1e-14);
        }
        for (a, b) in p.apply_covariance(&w).unwrap().iter().zip(&w) {
            assert!((a - b / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_matches_dense_assembly_and_is_symmetric() {
        let p = prior(16, 1.0 / 16.0, 5.0, 0.02);
        let n = 256;
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            a.set_column(j, &DVector::from_vec(p.apply_operator(&e).unwrap()));
        }
        assert!((&a - a.transpose()).amax() < 1e-12 * a.amax());
        let dense = &a * &a * p.grid().cell_volume();
        let (w, z) = (random(n, 2), random(n, 3));
        let pw = p.apply_precision(&w).unwrap();
        let pz = p.apply_precision(&z).unwrap();
        let oracle = dense * DVector::from_vec(w.clone());
        assert!(rel_l2(&pw, oracle.as_slice()) < 1e-13);
        let (l, r) = (dot(&pw, &z), dot(&w, &pz));
        assert!((l - r).abs() <= 1e-12 * l.abs());
    }

    #[test]
    fn covariance_inverts_precision() {
        let p = prior(16, 1.0 / 16.0, 28.0, 0.01);
        let w = random(256, 4);
        let back = p.apply_precision(&p.apply_covariance(&w).unwrap()).unwrap();
        assert!(rel_l2(&back, &w) < 1e-8);
    }

    #[test]
    fn samples_reproducible_and_clamped() {
        let p = prior(8, 0.125, 1.0, 0.05).with_c_min(0.9);
        let a = p.sample(17).unwrap();
        assert_eq!(a, p.sample(17).unwrap());
        assert_ne!(a, p.sample(18).unwrap());
        assert!(a.iter().all(|v| *v >= 0.9));
    }

    #[test]
    fn sample_statistics_match_dense_covariance() {
        let p = prior(8, 0.125, 4.0, 0.05);
        let cov = p.dense_covariance().unwrap();
        let centre = p.grid().index(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 10_000;
        let mut sum = vec![0.0; 64];
        let mut sq = 0.0;
        for _ in 0..m {
            let s = p.sample_around(p.mean(), &mut rng).unwrap();
            for (acc, v) in sum.iter_mut().zip(&s) {
                *acc += v;
            }
            sq += (s[centre] - 1.0).powi(2);
        }
        let var = sq / m as f64;
        assert!((var - cov[(centre, centre)]).abs() < 0.1 * cov[(centre, centre)]);
        for (i, s) in sum.iter().enumerate() {
            let sigma = cov[(i, i)].sqrt();
            assert!((s / m as f64 - 1.0).abs() < 3.0 * sigma / (m as f64).sqrt());
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = prior(8, 0.125, 1.0, 0.1);
        assert!(p.apply_precision(&[1.0; 63]).is_err());
        assert!(BiLaplacianPrior::new(p.grid().clone(), -1.0, 0.1, vec![1.0; 64]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn precision_is_positive_and_energy_vanishes_only_at_mean(seed in 0u64..10_000) {
            let p = prior(8, 0.125, 2.0, 0.03);
            let w = random(64, seed);
            prop_assert!(dot(&w, &p.apply_precision(&w).unwrap()) > 0.0);
            let u: Vec<f64> = p.mean().iter().zip(&w).map(|(a, b)| a + b).collect();
            prop_assert!(p.energy(&u).unwrap() > 0.0);
            prop_assert_eq!(p.energy(p.mean()).unwrap(), 0.0);
        }
    }
}
