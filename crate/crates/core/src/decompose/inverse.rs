//! Numerical inversion of strongly monotone Lipschitz maps.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::map::{prefix_jacobian, Map};
use crate::spectral_core::SpectralVector;

/// Solution of `f(x) = y` with its residual history length.
#[derive(Clone, Debug, PartialEq)]
pub struct Inverse {
    pub x: SpectralVector,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped iteration `x <- x - tau (f(x) - y)`, `tau = alpha / L^2`, from `x0 = y`.
///
/// Each step contracts by `q = sqrt(1 - alpha^2 / L^2)`.
pub fn invert_monotone(
    f: &dyn Map,
    y: &SpectralVector,
    alpha: f64,
    lip: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Inverse> {
    check_dim(f.dim(), y.dim())?;
    if alpha <= 0.0 || lip < alpha {
        return Err(Error::invalid("invert_monotone needs 0 < alpha <= L"));
    }
    let tau = alpha / (lip * lip);
    let mut x = y.clone();
    let mut residual = f64::INFINITY;
    for it in 0..=max_iter {
        let r = &f.apply(&x) - y;
        residual = r.norm();
        if residual <= tol {
            return Ok(Inverse {
                x,
                iterations: it,
                residual,
            });
        }
        x.axpy(-tau, &r);
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// A priori step count of [`invert_monotone`] from initial residual `r0`.
pub fn monotone_steps_bound(tol: f64, r0: f64, alpha: f64, lip: f64) -> usize {
    if r0 <= tol {
        return 0;
    }
    let q = (1.0 - (alpha / lip).powi(2)).sqrt();
    if q <= 0.0 {
        return 1;
    }
    ((tol / r0).ln() / q.ln()).ceil() as usize + 1
}

/// Chord iteration `x <- x - J^{-1}(f(x) - y)` with a frozen inverse Jacobian.
///
/// Fails fast when the residual stops contracting.
pub fn invert_chord(
    f: &dyn Map,
    y: &SpectralVector,
    x0: SpectralVector,
    jac_inv: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Inverse> {
    let mut x = x0;
    let mut prev = f64::INFINITY;
    let mut stalls = 0;
    for it in 0..=max_iter {
        let r = &f.apply(&x) - y;
        let residual = r.norm();
        if residual <= tol {
            return Ok(Inverse {
                x,
                iterations: it,
                residual,
            });
        }
        if residual > 0.7 * prev {
            stalls += 1;
            if stalls >= 3 {
                return Err(Error::NonConvergence { iterations: it, residual });
            }
        }
        prev = residual;
        let step = jac_inv * r.to_dvector();
        x.axpy(-1.0, &SpectralVector::from_dvector(&step));
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: prev,
    })
}

/// Newton's method with finite-difference Jacobians and residual backtracking.
pub fn invert_newton(f: &dyn Map, y: &SpectralVector, x0: SpectralVector, tol: f64, max_iter: usize) -> Result<Inverse> {
    let d = f.dim();
    let mut x = x0;
    let mut r = &f.apply(&x) - y;
    let mut residual = r.norm();
    for it in 0..=max_iter {
        if residual <= tol {
            return Ok(Inverse {
                x,
                iterations: it,
                residual,
            });
        }
        let jac = prefix_jacobian(f, &x, d, 1e-6 * (1.0 + x.max_abs()));
        let step = jac
            .lu()
            .solve(&r.to_dvector())
            .ok_or_else(|| Error::Numerical("singular Jacobian in Newton inversion".into()))?;
        let step = SpectralVector::from_dvector(&step);
        let mut lambda = 1.0;
        loop {
            let mut trial = x.clone();
            trial.axpy(-lambda, &step);
            let tr = &f.apply(&trial) - y;
            if tr.norm() < residual || lambda < 1e-6 {
                x = trial;
                residual = tr.norm();
                r = tr;
                break;
            }
            lambda *= 0.5;
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{FnMap, IdentityMap, ScalarMap};

    #[test]
    fn identity_and_scaling() {
        let y = SpectralVector::new(vec![0.3, -0.2, 0.1]);
        let out = invert_monotone(&IdentityMap(3), &y, 1.0, 1.0, 1e-14, 10).unwrap();
        assert_eq!(out.x, y);
        assert!(out.iterations <= 1);
        let e1 = SpectralVector::unit(3, 0);
        let two = ScalarMap { dim: 3, c: 2.0 };
        let out = invert_monotone(&two, &e1, 2.0, 2.0, 1e-12, 100).unwrap();
        assert!(out.x.distance(&e1.scale(0.5)) <= 1e-12);
    }

    #[test]
    fn iteration_count_within_geometric_bound() {
        let f = FnMap::new(2, |x: &SpectralVector| {
            let c = x.coeffs();
            SpectralVector::new(vec![c[0] + 0.3 * c[1].sin(), c[1] + 0.3 * c[0].tanh()])
        });
        let y = SpectralVector::new(vec![1.0, -0.5]);
        let (alpha, lip, tol) = (0.7, 1.3, 1e-10);
        let r0 = (&f.apply(&y) - &y).norm();
        let out = invert_monotone(&f, &y, alpha, lip, tol, 10_000).unwrap();
        assert!(out.iterations <= monotone_steps_bound(tol, r0, alpha, lip));
        assert!((&f.apply(&out.x) - &y).norm() <= tol);
        let chord = invert_chord(&f, &y, y.clone(), &DMatrix::identity(2, 2), 1e-14, 100).unwrap();
        assert!(chord.x.distance(&out.x) < 1e-9);
        let newton = invert_newton(&f, &y, SpectralVector::zeros(2), 1e-13, 50).unwrap();
        assert!(newton.x.distance(&chord.x) < 1e-12);
        assert!(invert_monotone(&f, &y, 0.0, 1.0, 1e-8, 10).is_err());
        assert!(matches!(
            invert_monotone(&f, &y, alpha, lip, 1e-14, 2),
            Err(Error::NonConvergence { .. })
        ));
    }
}
