//! A path of orthogonal operators on `l2` from the identity to a reflection,
//! built from smoothly switched 2x2 rotations, and the determinant scan of its
//! coordinate truncations.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_singular_value;
use crate::report::{csv, fmt_float};
use crate::smooth::smoothstep;

/// Block `i` (1-based) rotates by `rho(s - i) pi`; it is the identity for `s <= i`
/// and `-I` for `s >= i + 1`.
pub fn block_angle(s: f64, i: usize) -> f64 {
    smoothstep(s - i as f64) * PI
}

/// `[[cos, sin], [-sin, cos]]` blocks on coordinate pairs, cut to `dim` rows and columns.
fn block_rotation(s: f64, dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim.div_ceil(2) {
        let (sin, cos) = block_angle(s, i + 1).sin_cos();
        let (a, b) = (2 * i, 2 * i + 1);
        m[(a, a)] = cos;
        if b < dim {
            m[(a, b)] = sin;
            m[(b, a)] = -sin;
            m[(b, b)] = cos;
        }
    }
    m
}

/// The rotation path on `dim` coordinates for parameter `t`, cut to `dim`.
fn rotation_path(t: f64, dim: usize) -> DMatrix<f64> {
    if t >= 1.0 {
        -DMatrix::identity(dim, dim)
    } else {
        block_rotation(1.0 / (1.0 - t), dim)
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("t = {t} lies outside [0, 1]")))
    }
}

/// Pair-block rotation path on an even number of coordinates; `-I` at `t = 1`.
pub fn c_r(t: f64, m: usize) -> Result<DMatrix<f64>> {
    check_t(t)?;
    if m == 0 || m % 2 != 0 {
        return Err(Error::invalid("the pair-block path needs a positive even dimension"));
    }
    Ok(rotation_path(t, m))
}

/// `diag(-1, c_r(t, m - 1))` on an odd number of coordinates.
pub fn tilde_c_r(t: f64, m: usize) -> Result<DMatrix<f64>> {
    check_t(t)?;
    if m % 2 != 1 {
        return Err(Error::invalid("the shifted path needs an odd dimension"));
    }
    Ok(with_reflection(&rotation_path(t, m - 1)))
}

fn with_reflection(inner: &DMatrix<f64>) -> DMatrix<f64> {
    let n = inner.nrows() + 1;
    let mut out = DMatrix::zeros(n, n);
    out[(0, 0)] = -1.0;
    out.view_mut((1, 1), (n - 1, n - 1)).copy_from(inner);
    out
}

/// `P_dim H(., t)|_dim`: the first half runs `c_r(2t)`, the second half `tilde_c_r(2 - 2t)`.
pub fn isotopy_matrix(t: f64, dim: usize) -> Result<DMatrix<f64>> {
    check_t(t)?;
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if t <= 0.5 {
        Ok(rotation_path(2.0 * t, dim))
    } else {
        Ok(with_reflection(&rotation_path(2.0 - 2.0 * t, dim - 1)))
    }
}

/// `H(v, t)` for `v` supported on the first `v.len()` coordinates; the image has
/// one extra coordinate so that no rotation block is cut.
pub fn isotopy_h(v: &[f64], t: f64) -> Result<Vec<f64>> {
    let n = v.len() + 1;
    let m = isotopy_matrix(t, n)?;
    let mut padded = v.to_vec();
    padded.push(0.0);
    Ok((m * nalgebra::DVector::from_vec(padded)).iter().copied().collect())
}

/// Dimension on which the half of the path active at `t` has only whole blocks.
pub fn aligned_dim(t: f64, m: usize) -> usize {
    let even = t <= 0.5;
    if (m % 2 == 0) == even {
        m
    } else {
        m + 1
    }
}

/// Uniform grid on `[0, 1]` plus points `1/2 - 2^-k` accumulating at the midpoint.
pub fn default_t_grid(resolution: usize, dyadic: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=resolution).map(|i| i as f64 / resolution as f64).collect();
    grid.extend((2..2 + dyadic).map(|k| 0.5 - 0.5f64.powi(k as i32)));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Parameter ranges on which blocks beyond the `m` coordinates are still the identity.
pub fn valid_t_ranges(m: usize) -> [(f64, f64); 2] {
    let first = m.div_ceil(2) as f64 + 1.0;
    let second = (m.saturating_sub(1)).div_ceil(2) as f64 + 1.0;
    [(0.0, 0.5 * (1.0 - 1.0 / first)), (0.5 + 0.5 / second, 1.0)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotopyRow {
    pub t: f64,
    pub det: f64,
    pub min_sv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub bracket: (f64, f64),
    pub t_star: f64,
    pub det_at_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotopyScan {
    pub m: usize,
    pub rows: Vec<IsotopyRow>,
    pub endpoint_dets: (f64, f64),
    pub crossings: Vec<Crossing>,
    /// Largest `| |det| - 1 |` of block-aligned truncations over the grid.
    pub aligned_det_defect: f64,
    /// Largest `|M^T M - I|` entry of whole-block matrices over the grid.
    pub orthogonality_defect: f64,
    pub valid_t_ranges: [(f64, f64); 2],
}

impl IsotopyScan {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![fmt_float(r.t), fmt_float(r.det), fmt_float(r.min_sv)])
            .collect();
        csv(&["t", "det", "min_sv"], &rows)
    }
}

fn orthogonality_defect(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    (m.transpose() * m - DMatrix::identity(n, n)).abs().max()
}

/// Determinant of the `m`-coordinate truncation along `t_grid`, with every sign change bisected.
pub fn truncated_det_scan(m: usize, t_grid: &[f64], bisect_tol: f64) -> Result<IsotopyScan> {
    if m < 3 || m % 2 == 0 {
        return Err(Error::invalid("the truncation dimension must be odd and at least 3"));
    }
    if t_grid.len() < 2 || !(bisect_tol > 0.0) {
        return Err(Error::invalid("scan needs at least two grid points and a positive tolerance"));
    }
    let mut grid = t_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let per_point = grid
        .par_iter()
        .map(|&t| {
            let mat = isotopy_matrix(t, m)?;
            let aligned = isotopy_matrix(t, aligned_dim(t, m))?;
            let whole = if t <= 0.5 {
                c_r(2.0 * t, m + 1)?
            } else {
                tilde_c_r(2.0 - 2.0 * t, m)?
            };
            Ok((
                IsotopyRow {
                    t,
                    det: mat.determinant(),
                    min_sv: min_singular_value(&mat),
                },
                (aligned.determinant().abs() - 1.0).abs(),
                orthogonality_defect(&whole),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<IsotopyRow> = per_point.iter().map(|p| p.0).collect();
    let aligned_det_defect = per_point.iter().fold(0.0f64, |a, p| a.max(p.1));
    let orthogonality = per_point.iter().fold(0.0f64, |a, p| a.max(p.2));
    let det_at = |t: f64| isotopy_matrix(t, m).map(|x| x.determinant());
    let mut crossings = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.det == 0.0 {
            crossings.push(Crossing {
                bracket: (a.t, a.t),
                t_star: a.t,
                det_at_star: 0.0,
            });
            continue;
        }
        if b.det == 0.0 || a.det.signum() == b.det.signum() {
            continue;
        }
        let (mut lo, mut hi) = (a.t, b.t);
        let lo_sign = a.det.signum();
        while hi - lo > bisect_tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let d = det_at(mid)?;
            if d == 0.0 {
                lo = mid;
                hi = mid;
            } else if d.signum() == lo_sign {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_star = 0.5 * (lo + hi);
        crossings.push(Crossing {
            bracket: (lo, hi),
            t_star,
            det_at_star: det_at(t_star)?,
        });
    }
    Ok(IsotopyScan {
        m,
        endpoint_dets: (rows[0].det, rows[rows.len() - 1].det),
        rows,
        crossings,
        aligned_det_defect,
        orthogonality_defect: orthogonality,
        valid_t_ranges: valid_t_ranges(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_endpoints() {
        let id = DMatrix::<f64>::identity(6, 6);
        assert_eq!(c_r(0.0, 6).unwrap(), id);
        assert_eq!(c_r(1.0, 6).unwrap(), -id.clone());
        assert!(c_r(0.3, 5).is_err());
        assert!(tilde_c_r(0.3, 6).is_err());
        for t in [0.0, 0.2, 0.55, 0.8, 0.99, 1.0] {
            assert!((c_r(t, 8).unwrap().determinant() - 1.0).abs() < 1e-12);
            assert!((tilde_c_r(t, 7).unwrap().determinant() + 1.0).abs() < 1e-12);
            assert!(orthogonality_defect(&c_r(t, 8).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn isotopy_examples() {
        let v = [0.3, -1.0, 2.0, 0.5, -0.25];
        let at = |t| isotopy_h(&v, t).unwrap();
        let start = at(0.0);
        assert_eq!(&start[..5], &v);
        let mid = at(0.5);
        for i in 0..5 {
            assert!((mid[i] + v[i]).abs() < 1e-15);
        }
        let end = at(1.0);
        assert_eq!(end[0], -v[0]);
        assert_eq!(&end[1..5], &v[1..]);
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        for t in [0.13, 0.39, 0.49, 0.61, 0.97] {
            assert!((norm(&at(t)) - norm(&v)).abs() < 1e-12);
        }
    }

    #[test]
    fn seven_dim_crossing_matches_closed_form() {
        let grid = default_t_grid(200, 30);
        let scan = truncated_det_scan(7, &grid, 1e-13).unwrap();
        assert!((scan.endpoint_dets.0 - 1.0).abs() < 1e-12);
        assert!((scan.endpoint_dets.1 + 1.0).abs() < 1e-12);
        assert_eq!(scan.crossings.len(), 1);
        let c = scan.crossings[0];
        assert!(c.bracket.1 - c.bracket.0 < 1e-6);
        // The cut block is the fourth; its cosine vanishes where 1 / (1 - 2t) = 4.5.
        assert!((c.t_star - 7.0 / 18.0).abs() < 1e-9);
        assert!(c.det_at_star.abs() < 1e-8);
        assert!(scan.aligned_det_defect < 1e-12);
        assert!(scan.orthogonality_defect < 1e-12);
        let [first, second] = scan.valid_t_ranges;
        assert!(first.0 < c.t_star && c.t_star < first.1);
        assert!((second.0 - 0.625).abs() < 1e-15);
        assert!(scan.to_csv().starts_with("t,det,min_sv\n"));
    }

    #[test]
    fn rejects_even_truncation() {
        assert!(truncated_det_scan(6, &[0.0, 1.0], 1e-9).is_err());
        assert!(isotopy_matrix(1.5, 3).is_err());
    }
}
