//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spectral_core::SpectralVector;

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().max()
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eig(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    a.singular_values().min()
}

/// Orthonormalizes the columns of `a` (two passes of modified Gram-Schmidt).
pub fn orthonormalize_columns(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).clone_owned();
                q.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let n = q.column(j).norm();
        if n < 1e-12 {
            return Err(Error::Numerical("linearly dependent columns".into()));
        }
        q.column_mut(j).scale_mut(1.0 / n);
    }
    Ok(q)
}

/// `count` random orthonormal vectors supported on the first `support` coordinates.
pub fn random_orthonormal<R: Rng>(
    rng: &mut R,
    dim: usize,
    count: usize,
    support: usize,
) -> Result<Vec<SpectralVector>> {
    if count > support || support > dim {
        return Err(Error::Infeasible(format!(
            "{count} orthonormal vectors do not fit in support {support} of dimension {dim}"
        )));
    }
    let raw = DMatrix::from_fn(support, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = orthonormalize_columns(&raw)?;
    Ok((0..count)
        .map(|j| {
            let mut v = vec![0.0; dim];
            v[..support].copy_from_slice(q.column(j).as_slice());
            SpectralVector::new(v)
        })
        .collect())
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Polar decomposition `a = p * u` with `p` symmetric positive definite and `u` orthogonal.
pub fn polar(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let svd = a.clone().svd(true, true);
    let (Some(left), Some(right_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("svd failed".into()));
    };
    if svd.singular_values.min() <= 0.0 {
        return Err(Error::Numerical("singular matrix in polar decomposition".into()));
    }
    let p = &left * DMatrix::from_diagonal(&svd.singular_values) * left.transpose();
    let u = &left * right_t;
    Ok((p, u))
}

/// `p^s` for symmetric positive definite `p`.
pub fn spd_power(p: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((p + p.transpose()) * 0.5);
    let lam = eig.eigenvalues.map(|l| l.max(f64::MIN_POSITIVE).powf(s));
    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
}

/// Nearest orthogonal matrix (orthogonal polar factor).
pub fn reorthogonalize(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    polar(u).map(|(_, q)| q)
}

pub fn outer(a: &SpectralVector, b: &SpectralVector) -> DMatrix<f64> {
    DMatrix::from_fn(a.dim(), b.dim(), |i, j| a.coeffs()[i] * b.coeffs()[j])
}

/// Solves a tridiagonal system with the Thomas algorithm.
///
/// `lower[i]` couples row `i + 1` to column `i`; `upper[i]` couples row `i` to column `i + 1`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if rhs.len() != n || lower.len() + 1 != n.max(1) || upper.len() + 1 != n.max(1) {
        return Err(Error::invalid("inconsistent tridiagonal system"));
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Numerical("zero pivot".into()));
    }
    if n > 1 {
        c[0] = upper[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i - 1] * c[i - 1];
        if denom == 0.0 {
            return Err(Error::Numerical("zero pivot".into()));
        }
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Serde adapter writing a matrix as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (ncols, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

/// Serde adapter writing a vector as a plain list.
pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Deserialize::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polar_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 5, 5);
        let (p, u) = polar(&a).unwrap();
        assert!((&p * &u - &a).abs().max() < 1e-12);
        assert!((u.transpose() * &u - DMatrix::identity(5, 5)).abs().max() < 1e-12);
        assert!(min_sym_eig(&p) > 0.0);
        let half = spd_power(&p, 0.5);
        assert!((&half * &half - &p).abs().max() < 1e-10);
    }

    #[test]
    fn orthonormal_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fam = random_orthonormal(&mut rng, 10, 4, 6).unwrap();
        for (i, a) in fam.iter().enumerate() {
            assert!(a.coeffs()[6..].iter().all(|c| *c == 0.0));
            for (j, b) in fam.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((a.dot(b) - expect).abs() < 1e-12);
            }
        }
        assert!(random_orthonormal(&mut rng, 10, 7, 6).is_err());
    }

    #[test]
    fn thomas_matches_dense() {
        let lower = [1.0, -2.0, 0.5];
        let diag = [4.0, 5.0, 6.0, 3.0];
        let upper = [0.3, 1.0, -1.0];
        let rhs = [1.0, 2.0, 3.0, 4.0];
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
        let mut a = DMatrix::zeros(4, 4);
        for i in 0..4 {
            a[(i, i)] = diag[i];
            if i < 3 {
                a[(i + 1, i)] = lower[i];
                a[(i, i + 1)] = upper[i];
            }
        }
        let dense = a.lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        for i in 0..4 {
            assert!((x[i] - dense[i]).abs() < 1e-13);
        }
    }
}
