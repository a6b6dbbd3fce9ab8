//! Small vector helpers and a matrix-free conjugate gradient solver.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(alpha: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| alpha * x).collect()
}

/// Relative l2 distance `‖a − b‖ / ‖b‖`; falls back to the absolute distance when `b = 0`.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(&sub(a, b));
    let nb = norm(b);
    if nb > 0.0 {
        d / nb
    } else {
        d
    }
}

/// Solves `A x = b` for a symmetric positive definite operator given as a closure.
///
/// Stops once `‖r‖ ≤ rel_tol · ‖b‖`. Returns the solution and the iteration count.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = rel_tol * bnorm;
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Solver(format!("operator not positive definite (pAp = {pap:e})")));
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return Ok((x, it + 1));
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Err(Error::Solver(format!(
        "conjugate gradient did not reach relative residual {rel_tol:e} in {max_iter} iterations"
    )))
}
