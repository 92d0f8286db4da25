//! Factoring an invertible matrix into near-identity linear steps.
//!
//! `A = P U` (polar form).  If `det U < 0` the reflection `diag(-1, 1, ...)`
//! is split off first.  The rotation part is interpolated through its real
//! Schur angles and the stretch part through powers `P^(1/n)`.

use nalgebra::{DMatrix, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, polar, reorthogonalize, spd_power, spectral_norm};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

/// Safety factor applied to `epsilon` when sizing steps.
const STEP_MARGIN: f64 = 0.95;

/// `matrix` applied `repeat` times in a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeatedFactor {
    #[serde(with = "linalg::rows")]
    pub matrix: DMatrix<f64>,
    pub repeat: usize,
    /// `|matrix - I|` in the spectral norm.
    pub step_norm: f64,
}

/// `A = stretch^n_s * rotation^n_r * A0` with `A0` the identity or `diag(-1, 1, ...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearPath {
    pub reflect: bool,
    pub rotation: RepeatedFactor,
    pub stretch: RepeatedFactor,
    /// `|product - A| / |A|`.
    pub product_error: f64,
    /// Largest rotation angle of the orientation-preserving part.
    pub max_angle: f64,
}

impl LinearPath {
    pub fn block_count(&self) -> usize {
        self.rotation.repeat + self.stretch.repeat
    }

    /// Factors in application order.
    pub fn factors(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        std::iter::repeat_n(&self.rotation.matrix, self.rotation.repeat)
            .chain(std::iter::repeat_n(&self.stretch.matrix, self.stretch.repeat))
    }

    pub fn a0_matrix(&self, dim: usize) -> DMatrix<f64> {
        let mut a0 = DMatrix::identity(dim, dim);
        if self.reflect {
            a0[(0, 0)] = -1.0;
        }
        a0
    }

    /// Product of all factors after `A0`.
    pub fn product(&self, dim: usize) -> DMatrix<f64> {
        self.factors().fold(self.a0_matrix(dim), |acc, f| f * acc)
    }
}

/// Skew generator of an orthogonal `u` with `det u = +1`, in the basis `z`: `u = z exp(S) z^T`.
fn rotation_generator(u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let k = u.nrows();
    let schur = Schur::try_new(u.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Numerical("real Schur form did not converge".into()))?;
    let (z, t) = schur.unpack();
    let mut gen = DMatrix::zeros(k, k);
    let mut negatives = Vec::new();
    let mut i = 0;
    while i < k {
        if i + 1 < k && t[(i + 1, i)].abs() > 1e-10 {
            let theta = t[(i + 1, i)].atan2(t[(i, i)]);
            gen[(i + 1, i)] = theta;
            gen[(i, i + 1)] = -theta;
            i += 2;
        } else {
            if t[(i, i)] < 0.0 {
                negatives.push(i);
            }
            i += 1;
        }
    }
    if negatives.len() % 2 == 1 {
        return Err(Error::Numerical("orientation-preserving factor has an odd number of -1 eigenvalues".into()));
    }
    for pair in negatives.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        gen[(b, a)] = std::f64::consts::PI;
        gen[(a, b)] = -std::f64::consts::PI;
    }
    let max_angle = gen.abs().max();
    Ok((z, gen, max_angle))
}

/// `exp` of a skew matrix made of disjoint planar blocks.
fn planar_exp(gen: &DMatrix<f64>) -> DMatrix<f64> {
    let k = gen.nrows();
    let mut out = DMatrix::identity(k, k);
    for a in 0..k {
        for b in 0..k {
            let theta = gen[(b, a)];
            if a < b && theta != 0.0 {
                let (s, c) = theta.sin_cos();
                out[(a, a)] = c;
                out[(b, b)] = c;
                out[(b, a)] = s;
                out[(a, b)] = -s;
            }
        }
    }
    out
}

/// Smallest `n` with `|lambda^(1/n) - 1| < bound` for every eigenvalue of `p`.
fn stretch_steps(eigs: &[f64], bound: f64) -> usize {
    let worst = eigs.iter().map(|l| l.ln().abs()).fold(0.0, f64::max);
    if worst < 1e-15 {
        return 0;
    }
    let mut n = (worst / (1.0 + bound).ln()).floor().max(1.0) as usize;
    while eigs.iter().any(|l| (l.powf(1.0 / n as f64) - 1.0).abs() >= bound) {
        n += 1;
    }
    n
}

pub fn linear_path_blocks(df0: &DMatrix<f64>, epsilon: f64) -> Result<LinearPath> {
    let k = df0.nrows();
    if df0.ncols() != k || k == 0 {
        return Err(Error::invalid("linear path needs a nonempty square matrix"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid("epsilon must lie in (0, 1)"));
    }
    let sv = df0.singular_values();
    if sv.min() <= 0.0 || sv.max() / sv.min() > MAX_CONDITION {
        return Err(Error::Numerical("matrix is singular to working precision".into()));
    }
    let (p, u) = polar(df0)?;
    let reflect = u.determinant() < 0.0;
    let mut a0 = DMatrix::identity(k, k);
    if reflect {
        a0[(0, 0)] = -1.0;
    }
    let rotation_target = reorthogonalize(&(&u * &a0))?;
    let bound = STEP_MARGIN * epsilon;
    let (rotation_step, rotation_count, max_angle) = if (&rotation_target - DMatrix::identity(k, k)).abs().max() < 1e-14
    {
        (DMatrix::identity(k, k), 0, 0.0)
    } else {
        let (z, gen, max_angle) = rotation_generator(&rotation_target)?;
        // |R(phi) - I| = 2 sin(phi / 2).
        let count = (max_angle / (2.0 * (bound / 2.0).asin())).ceil().max(1.0) as usize;
        let step = reorthogonalize(&(&z * planar_exp(&(gen / count as f64)) * z.transpose()))?;
        (step, count, max_angle)
    };
    let eigs: Vec<f64> = nalgebra::SymmetricEigen::new((&p + p.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    let stretch_count = stretch_steps(&eigs, bound);
    let stretch_step = if stretch_count == 0 {
        DMatrix::identity(k, k)
    } else {
        spd_power(&p, 1.0 / stretch_count as f64)
    };
    let id = DMatrix::identity(k, k);
    let path = LinearPath {
        reflect,
        rotation: RepeatedFactor {
            step_norm: spectral_norm(&(&rotation_step - &id)),
            matrix: rotation_step,
            repeat: rotation_count,
        },
        stretch: RepeatedFactor {
            step_norm: spectral_norm(&(&stretch_step - &id)),
            matrix: stretch_step,
            repeat: stretch_count,
        },
        product_error: 0.0,
        max_angle,
    };
    let product_error = spectral_norm(&(path.product(k) - df0)) / spectral_norm(df0);
    if product_error > 1e-8 {
        return Err(Error::Numerical(format!("linear factors reproduce the matrix only to {product_error:e}")));
    }
    Ok(LinearPath { product_error, ..path })
}
