//! Piecewise-linear finite elements on `[0, 1]` for `u'' - g(u) = x` with
//! homogeneous Dirichlet data, and Galerkin matrices of the sign-changing
//! operator paths `v -> sign(t - s) v` and `u -> -((1 + t) sign(t - s) u')'`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_singular_value, solve_tridiagonal};
use crate::report::{csv, fmt_float};
use crate::spectral_core::{basis_value, composite_rule, gauss_legendre, BasisKind};

/// Gauss points per element for load vectors and nonlinear terms.
const ELEMENT_POINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// `u(0) = u(1) = 0`.
    DirichletDirichlet,
    /// `u(0) = 0`, `u'(1) = 0`.
    DirichletNeumann,
}

/// Uniform mesh of `elements` cells with hat functions on the free nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FemMesh {
    pub elements: usize,
    pub bc: BoundaryCondition,
}

impl FemMesh {
    pub fn new(elements: usize, bc: BoundaryCondition) -> Result<Self> {
        if elements < 2 {
            return Err(Error::invalid("a mesh needs at least two elements"));
        }
        Ok(FemMesh { elements, bc })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.elements as f64
    }

    /// Number of unknowns.
    pub fn dofs(&self) -> usize {
        match self.bc {
            BoundaryCondition::DirichletDirichlet => self.elements - 1,
            BoundaryCondition::DirichletNeumann => self.elements,
        }
    }

    /// Coordinate of unknown `j` (node `j + 1`).
    pub fn node(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.h()
    }

    /// Nodal values including boundary nodes.
    fn full_nodal(&self, w: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.elements + 1);
        out.push(0.0);
        out.extend_from_slice(w);
        if self.bc == BoundaryCondition::DirichletDirichlet {
            out.push(0.0);
        }
        out
    }
}

/// Tridiagonal matrix as (lower, diag, upper) bands.
#[derive(Clone, Debug, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i + 1, i)] = self.lower[i];
                m[(i, i + 1)] = self.upper[i];
            }
        }
        m
    }

    pub fn mul(&self, w: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * w[i];
                if i > 0 {
                    v += self.lower[i - 1] * w[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * w[i + 1];
                }
                v
            })
            .collect()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        solve_tridiagonal(&self.lower, &self.diag, &self.upper, rhs)
    }
}

/// `b_jk = int chi_j' chi_k'`.
pub fn assemble_stiffness(mesh: &FemMesh) -> Tridiagonal {
    let n = mesh.dofs();
    let inv_h = 1.0 / mesh.h();
    let mut diag = vec![2.0 * inv_h; n];
    if mesh.bc == BoundaryCondition::DirichletNeumann {
        diag[n - 1] = inv_h;
    }
    Tridiagonal {
        lower: vec![-inv_h; n - 1],
        diag,
        upper: vec![-inv_h; n - 1],
    }
}

/// `g = G'` with `G` convex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexNonlinearity {
    /// `g = 0`.
    Zero,
    /// `g(u) = u`.
    Linear,
    /// `g(u) = u^3`.
    Cubic,
}

impl ConvexNonlinearity {
    pub fn g(&self, u: f64) -> f64 {
        match self {
            ConvexNonlinearity::Zero => 0.0,
            ConvexNonlinearity::Linear => u,
            ConvexNonlinearity::Cubic => u * u * u,
        }
    }

    pub fn dg(&self, u: f64) -> f64 {
        match self {
            ConvexNonlinearity::Zero => 0.0,
            ConvexNonlinearity::Linear => 1.0,
            ConvexNonlinearity::Cubic => 3.0 * u * u,
        }
    }

    /// The primitive `G` with `G(0) = 0`.
    pub fn primitive(&self, u: f64) -> f64 {
        match self {
            ConvexNonlinearity::Zero => 0.0,
            ConvexNonlinearity::Linear => 0.5 * u * u,
            ConvexNonlinearity::Cubic => 0.25 * u * u * u * u,
        }
    }

    /// `(c0, c1, p)` with `-c0 <= G(r) <= c1 (1 + |r|^p)`.
    pub fn growth(&self) -> (f64, f64, f64) {
        match self {
            ConvexNonlinearity::Zero => (0.0, 0.0, 1.0),
            ConvexNonlinearity::Linear => (0.0, 0.5, 2.0),
            ConvexNonlinearity::Cubic => (0.0, 0.25, 4.0),
        }
    }

    /// `g` nondecreasing on a grid of `[-radius, radius]`.
    pub fn is_monotone_on(&self, radius: f64, points: usize) -> bool {
        let values: Vec<f64> = (0..=points)
            .map(|i| self.g(-radius + 2.0 * radius * i as f64 / points as f64))
            .collect();
        values.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Element-wise quadrature: for each element, the points and weights.
fn element_rule(mesh: &FemMesh) -> Vec<(f64, f64, Vec<(f64, f64)>)> {
    let (gx, gw) = gauss_legendre(ELEMENT_POINTS);
    let h = mesh.h();
    (0..mesh.elements)
        .map(|e| {
            let a = e as f64 * h;
            let pts = gx.iter().zip(&gw).map(|(x, w)| (a + 0.5 * h * (x + 1.0), 0.5 * h * w)).collect();
            (a, a + h, pts)
        })
        .collect()
}

/// Free-node index of node `i`, if any.
fn dof_of(mesh: &FemMesh, node: usize) -> Option<usize> {
    if node == 0 || node > mesh.dofs() {
        None
    } else {
        Some(node - 1)
    }
}

/// `int x chi_j`.
pub fn load_vector<F: Fn(f64) -> f64>(mesh: &FemMesh, x: F) -> Vec<f64> {
    let mut b = vec![0.0; mesh.dofs()];
    for (e, (a, _, pts)) in element_rule(mesh).into_iter().enumerate() {
        for (t, w) in pts {
            let right = (t - a) / mesh.h();
            let fx = x(t) * w;
            if let Some(j) = dof_of(mesh, e) {
                b[j] += fx * (1.0 - right);
            }
            if let Some(j) = dof_of(mesh, e + 1) {
                b[j] += fx * right;
            }
        }
    }
    b
}

/// Nonlinear residual part `int g(w_h) chi_j`, its Jacobian and `int G(w_h)`.
fn nonlinear_terms(mesh: &FemMesh, g: ConvexNonlinearity, w: &[f64]) -> (Vec<f64>, Tridiagonal, f64) {
    let n = mesh.dofs();
    let nodal = mesh.full_nodal(w);
    let mut r = vec![0.0; n];
    let mut jac = Tridiagonal {
        lower: vec![0.0; n.saturating_sub(1)],
        diag: vec![0.0; n],
        upper: vec![0.0; n.saturating_sub(1)],
    };
    let mut energy = 0.0;
    if g == ConvexNonlinearity::Zero {
        return (r, jac, energy);
    }
    for (e, (a, _, pts)) in element_rule(mesh).into_iter().enumerate() {
        let (ja, jb) = (dof_of(mesh, e), dof_of(mesh, e + 1));
        for (t, wq) in pts {
            let right = (t - a) / mesh.h();
            let left = 1.0 - right;
            let u = nodal[e] * left + nodal[e + 1] * right;
            let (gv, dgv) = (g.g(u) * wq, g.dg(u) * wq);
            energy += g.primitive(u) * wq;
            if let Some(j) = ja {
                r[j] += gv * left;
                jac.diag[j] += dgv * left * left;
            }
            if let Some(k) = jb {
                r[k] += gv * right;
                jac.diag[k] += dgv * right * right;
            }
            if let (Some(j), Some(_)) = (ja, jb) {
                jac.upper[j] += dgv * left * right;
                jac.lower[j] += dgv * left * right;
            }
        }
    }
    (r, jac, energy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemilinearSolution {
    /// Values at the free nodes.
    pub w: Vec<f64>,
    pub newton_steps: usize,
    pub residual: f64,
    /// Merit energy at the start and after each accepted step.
    pub energies: Vec<f64>,
}

impl SemilinearSolution {
    pub fn energy_decreasing(&self) -> bool {
        self.energies.windows(2).all(|e| e[1] <= e[0])
    }
}

fn energy(stiff: &Tridiagonal, load: &[f64], w: &[f64], nonlinear: f64) -> f64 {
    let kw = stiff.mul(w);
    let quad: f64 = kw.iter().zip(w).map(|(a, b)| a * b).sum();
    let lin: f64 = load.iter().zip(w).map(|(a, b)| a * b).sum();
    0.5 * quad + nonlinear + lin
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Damped Newton on `K w + int g(w_h) chi + int x chi = 0` from `w = 0`.
///
/// The merit `1/2 w^T K w + int G(w_h) + int x w_h` is convex with this
/// residual as its gradient; steps are halved until it decreases.
pub fn solve_semilinear<F: Fn(f64) -> f64>(
    source: F,
    mesh: &FemMesh,
    g: ConvexNonlinearity,
    tol: f64,
) -> Result<SemilinearSolution> {
    if mesh.bc != BoundaryCondition::DirichletDirichlet {
        return Err(Error::invalid("the semilinear solver uses Dirichlet conditions at both ends"));
    }
    let stiff = assemble_stiffness(mesh);
    let load = load_vector(mesh, source);
    let n = mesh.dofs();
    let mut w = vec![0.0; n];
    let (mut nl, mut jac, mut nl_energy) = nonlinear_terms(mesh, g, &w);
    let mut merit = energy(&stiff, &load, &w, nl_energy);
    let mut energies = vec![merit];
    let residual_of = |w: &[f64], nl: &[f64]| -> Vec<f64> {
        stiff.mul(w).iter().zip(nl).zip(&load).map(|((a, b), c)| a + b + c).collect()
    };
    let mut r = residual_of(&w, &nl);
    for step in 0..100 {
        let res = max_abs(&r);
        if res <= tol {
            return Ok(SemilinearSolution {
                w,
                newton_steps: step,
                residual: res,
                energies,
            });
        }
        let full = Tridiagonal {
            lower: stiff.lower.iter().zip(&jac.lower).map(|(a, b)| a + b).collect(),
            diag: stiff.diag.iter().zip(&jac.diag).map(|(a, b)| a + b).collect(),
            upper: stiff.upper.iter().zip(&jac.upper).map(|(a, b)| a + b).collect(),
        };
        let delta = full.solve(&r)?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = w.iter().zip(&delta).map(|(a, d)| a - lambda * d).collect();
            let (tnl, tjac, tnl_energy) = nonlinear_terms(mesh, g, &trial);
            let t_merit = energy(&stiff, &load, &trial, tnl_energy);
            let t_r = residual_of(&trial, &tnl);
            // Near the minimizer the merit is flat to rounding; accept residual decrease there.
            if t_merit < merit || (t_merit <= merit + 1e-14 * merit.abs().max(1.0) && max_abs(&t_r) < res) {
                w = trial;
                nl = tnl;
                jac = tjac;
                nl_energy = tnl_energy;
                merit = t_merit.min(merit);
                energies.push(merit);
                r = t_r;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                return Err(Error::NonConvergence {
                    iterations: step,
                    residual: res,
                });
            }
        }
        let _ = (&nl, nl_energy);
    }
    Err(Error::NonConvergence {
        iterations: 100,
        residual: max_abs(&r),
    })
}

/// `|u_c - u_f|_{H^1}` for nested piecewise-linear functions given by full nodal values.
pub fn h1_seminorm_diff(coarse: &[f64], fine: &[f64]) -> Result<f64> {
    let (nc, nf) = (coarse.len() - 1, fine.len() - 1);
    if nc == 0 || nf % nc != 0 {
        return Err(Error::invalid("meshes are not nested"));
    }
    let ratio = nf / nc;
    let hf = 1.0 / nf as f64;
    let hc = 1.0 / nc as f64;
    let mut sum = 0.0;
    for e in 0..nf {
        let c = e / ratio;
        let dc = (coarse[c + 1] - coarse[c]) / hc;
        let df = (fine[e + 1] - fine[e]) / hf;
        sum += (dc - df) * (dc - df) * hf;
    }
    Ok(sum.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FemRow {
    pub elements: usize,
    pub h: f64,
    pub h1_error: f64,
    /// Error of the previous (coarser) row over this one.
    pub ratio: Option<f64>,
    pub newton_steps: usize,
    pub energy_decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FemConvergence {
    pub reference_elements: usize,
    pub rows: Vec<FemRow>,
}

impl FemConvergence {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.elements.to_string(),
                    fmt_float(r.h),
                    fmt_float(r.h1_error),
                    r.ratio.map_or(String::new(), fmt_float),
                    r.newton_steps.to_string(),
                ]
            })
            .collect();
        csv(&["elements", "h", "h1_error", "ratio", "newton_steps"], &rows)
    }
}

/// H1-seminorm errors against a reference solved on a mesh 8 times finer than the finest.
pub fn fem_convergence<F>(source: F, g: ConvexNonlinearity, elements: &[usize], tol: f64) -> Result<FemConvergence>
where
    F: Fn(f64) -> f64 + Sync,
{
    let finest = *elements.iter().max().ok_or_else(|| Error::invalid("no meshes given"))?;
    let reference_elements = 8 * finest;
    if elements.iter().any(|n| reference_elements % n != 0) {
        return Err(Error::invalid("mesh sizes must divide the reference mesh"));
    }
    let reference_mesh = FemMesh::new(reference_elements, BoundaryCondition::DirichletDirichlet)?;
    let reference = solve_semilinear(&source, &reference_mesh, g, tol)?;
    let reference_nodal = reference_mesh.full_nodal(&reference.w);
    let solved = elements
        .par_iter()
        .map(|&n| {
            let mesh = FemMesh::new(n, BoundaryCondition::DirichletDirichlet)?;
            let sol = solve_semilinear(&source, &mesh, g, tol)?;
            let err = h1_seminorm_diff(&mesh.full_nodal(&sol.w), &reference_nodal)?;
            Ok((n, mesh.h(), err, sol))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<FemRow> = Vec::with_capacity(solved.len());
    for (n, h, err, sol) in solved {
        let ratio = rows.last().map(|prev| prev.h1_error / err);
        rows.push(FemRow {
            elements: n,
            h,
            h1_error: err,
            ratio,
            newton_steps: sol.newton_steps,
            energy_decreasing: sol.energy_decreasing(),
        });
    }
    Ok(FemConvergence {
        reference_elements,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalerkinKind {
    /// `a_jk(s) = int sign(t - s) psi_j psi_k` for an orthonormal basis of `L2(0, 1)`.
    A,
    /// `b_jk(s) = int (1 + t) sign(t - s) chi_j' chi_k'` for hats with `u(0) = 0`, `u'(1) = 0`.
    B,
}

/// Panels on each side of the split point for orthonormal-basis integrals.
const SPLIT_PANELS: usize = 16;
const SPLIT_POINTS: usize = 12;

fn sign_split_rule(s: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (a, b, sign) in [(0.0, s, -1.0), (s, 1.0, 1.0)] {
        if b > a {
            let (x, w) = composite_rule(a, b, SPLIT_PANELS, SPLIT_POINTS);
            out.extend(x.into_iter().zip(w).map(|(x, w)| (x, sign * w)));
        }
    }
    out
}

/// `int_a^b (1 + t) sign(t - s) dt` in closed form.
fn weighted_sign_integral(a: f64, b: f64, s: f64) -> f64 {
    let prim = |t: f64| t + 0.5 * t * t;
    let split = s.clamp(a, b);
    -(prim(split) - prim(a)) + (prim(b) - prim(split))
}

/// Galerkin matrix of the `s`-path with `n` basis functions.
pub fn galerkin_path_matrix(kind: GalerkinKind, s: f64, n: usize, basis: BasisKind) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid("s must lie in [0, 1]"));
    }
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    match kind {
        GalerkinKind::A => {
            if basis == BasisKind::FemHat {
                return Err(Error::invalid("the multiplication path uses an orthonormal L2 basis"));
            }
            let rule = sign_split_rule(s);
            let values: Vec<Vec<f64>> = (0..n)
                .map(|j| rule.iter().map(|(t, _)| basis_value(basis, j, *t)).collect())
                .collect();
            Ok(DMatrix::from_fn(n, n, |j, k| {
                rule.iter()
                    .enumerate()
                    .map(|(q, (_, w))| w * values[j][q] * values[k][q])
                    .sum()
            }))
        }
        GalerkinKind::B => {
            if basis != BasisKind::FemHat {
                return Err(Error::invalid("the divergence-form path uses hat functions"));
            }
            let mesh = FemMesh::new(n, BoundaryCondition::DirichletNeumann)?;
            let h = mesh.h();
            let mut m = DMatrix::zeros(n, n);
            for e in 0..n {
                let coef = weighted_sign_integral(e as f64 * h, (e + 1) as f64 * h, s) / (h * h);
                // On element e, chi_{node e}' = -1/h and chi_{node e+1}' = 1/h.
                let (ja, jb) = (dof_of(&mesh, e), dof_of(&mesh, e + 1));
                if let Some(j) = ja {
                    m[(j, j)] += coef;
                }
                if let Some(k) = jb {
                    m[(k, k)] += coef;
                }
                if let (Some(j), Some(k)) = (ja, jb) {
                    m[(j, k)] -= coef;
                    m[(k, j)] -= coef;
                }
            }
            Ok(m)
        }
    }
}

/// `| |A_s u| - |u| |` for `u = sum c_j psi_j`, integrated with the split rule.
pub fn isometry_defect(s: f64, coeffs: &[f64], basis: BasisKind) -> f64 {
    let rule = sign_split_rule(s);
    let (mut image, mut plain) = (0.0, 0.0);
    for (t, w) in rule {
        let u: f64 = coeffs.iter().enumerate().map(|(j, c)| c * basis_value(basis, j, t)).sum();
        let sign = if t < s { -1.0 } else { 1.0 };
        image += w.abs() * (sign * u) * (sign * u);
        plain += w.abs() * u * u;
    }
    (image.sqrt() - plain.sqrt()).abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub s: f64,
    pub det: f64,
    pub min_sv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityScan {
    pub kind: GalerkinKind,
    pub n: usize,
    pub rows: Vec<ScanRow>,
    pub endpoint_signs: (i8, i8),
    /// Bisection bracket of the first sign change.
    pub bracket: (f64, f64),
    pub s_star: f64,
    pub det_at_star: f64,
    pub min_sv_at_star: f64,
}

impl SingularityScan {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![fmt_float(r.s), fmt_float(r.det), fmt_float(r.min_sv)])
            .collect();
        csv(&["s", "det", "min_sv"], &rows)
    }
}

fn sign_i8(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Determinant and smallest singular value along `s_grid`, with the sign change bisected.
pub fn singularity_scan(
    kind: GalerkinKind,
    n: usize,
    basis: BasisKind,
    s_grid: &[f64],
    bisect_tol: f64,
) -> Result<SingularityScan> {
    if s_grid.len() < 2 || !(bisect_tol > 0.0) {
        return Err(Error::invalid("scan needs at least two grid points and a positive tolerance"));
    }
    let rows = s_grid
        .par_iter()
        .map(|&s| {
            let m = galerkin_path_matrix(kind, s, n, basis)?;
            Ok(ScanRow {
                s,
                det: m.determinant(),
                min_sv: min_singular_value(&m),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let endpoint_signs = (sign_i8(rows[0].det), sign_i8(rows[rows.len() - 1].det));
    let det_at = |s: f64| galerkin_path_matrix(kind, s, n, basis).map(|m| m.determinant());
    let nonzero: Vec<&ScanRow> = rows.iter().filter(|r| r.det != 0.0).collect();
    let exact_zero = rows.iter().find(|r| r.det == 0.0);
    let bracket = if let Some(z) = exact_zero {
        (z.s, z.s)
    } else {
        let pair = nonzero
            .windows(2)
            .find(|w| sign_i8(w[0].det) != sign_i8(w[1].det))
            .ok_or_else(|| Error::Numerical("no determinant sign change on the grid".into()))?;
        let (mut lo, mut hi) = (pair[0].s, pair[1].s);
        let lo_sign = sign_i8(pair[0].det);
        while hi - lo > bisect_tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let d = det_at(mid)?;
            if d == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if sign_i8(d) == lo_sign {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, hi)
    };
    let s_star = 0.5 * (bracket.0 + bracket.1);
    let m_star = galerkin_path_matrix(kind, s_star, n, basis)?;
    Ok(SingularityScan {
        kind,
        n,
        rows,
        endpoint_signs,
        bracket,
        s_star,
        det_at_star: m_star.determinant(),
        min_sv_at_star: min_singular_value(&m_star),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn stiffness_examples() {
        let mesh = FemMesh::new(2, BoundaryCondition::DirichletDirichlet).unwrap();
        let k = assemble_stiffness(&mesh);
        assert_eq!(k.diag, vec![4.0]);
        let mesh = FemMesh::new(16, BoundaryCondition::DirichletDirichlet).unwrap();
        let dense = assemble_stiffness(&mesh).to_dense();
        assert!(dense.clone().cholesky().is_some());
        let mut eig: Vec<f64> = dense.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let h = mesh.h();
        for (k, l) in eig.iter().enumerate() {
            let exact = (2.0 / h) * (1.0 - ((k + 1) as f64 * PI * h).cos());
            assert!((l - exact).abs() < 1e-10 * exact.max(1.0));
        }
    }

    #[test]
    fn manufactured_solutions() {
        for (g, src) in [
            (ConvexNonlinearity::Zero, -PI * PI),
            (ConvexNonlinearity::Linear, -(PI * PI + 1.0)),
        ] {
            let mut prev = f64::INFINITY;
            for n in [16usize, 32, 64] {
                let mesh = FemMesh::new(n, BoundaryCondition::DirichletDirichlet).unwrap();
                let sol = solve_semilinear(|t| src * (PI * t).sin(), &mesh, g, 1e-12).unwrap();
                let err = (0..mesh.dofs())
                    .map(|j| (sol.w[j] - (PI * mesh.node(j)).sin()).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1.5 * (PI * mesh.h()).powi(2) / 12.0 + 1e-12, "n={n} err={err}");
                assert!(err < 1e-10 || err < prev / 3.5);
                prev = err;
                assert!(sol.energy_decreasing());
            }
        }
        let mesh = FemMesh::new(8, BoundaryCondition::DirichletDirichlet).unwrap();
        let sol = solve_semilinear(|_| 0.0, &mesh, ConvexNonlinearity::Cubic, 1e-12).unwrap();
        assert!(sol.w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cubic_newton_decreases_energy() {
        let mesh = FemMesh::new(32, BoundaryCondition::DirichletDirichlet).unwrap();
        let sol = solve_semilinear(|t| -40.0 * (PI * t).sin(), &mesh, ConvexNonlinearity::Cubic, 1e-11).unwrap();
        assert!(sol.newton_steps > 1);
        assert!(sol.energy_decreasing());
        assert!(ConvexNonlinearity::Cubic.is_monotone_on(3.0, 100));
    }

    #[test]
    fn convergence_table() {
        let src = |t: f64| -(PI * PI + 1.0) * (PI * t).sin();
        let a = fem_convergence(src, ConvexNonlinearity::Linear, &[8, 16, 32], 1e-12).unwrap();
        let b = fem_convergence(src, ConvexNonlinearity::Linear, &[8, 16, 32], 1e-12).unwrap();
        assert_eq!(a, b);
        for r in &a.rows[1..] {
            let ratio = r.ratio.unwrap();
            assert!((1.7..=2.3).contains(&ratio), "{ratio}");
        }
        assert!(a.to_csv().starts_with("elements,h,h1_error,ratio,newton_steps\n"));
    }

    #[test]
    fn path_matrix_examples() {
        for s in [0.0, 0.1, 0.37, 0.5, 1.0] {
            let a = galerkin_path_matrix(GalerkinKind::A, s, 1, BasisKind::Fourier).unwrap();
            assert!((a[(0, 0)] - (1.0 - 2.0 * s)).abs() < 1e-14);
        }
        let n = 5;
        let zero = galerkin_path_matrix(GalerkinKind::A, 0.0, n, BasisKind::Fourier).unwrap();
        assert!((zero.clone() - DMatrix::identity(n, n)).abs().max() < 1e-13);
        let one = galerkin_path_matrix(GalerkinKind::A, 1.0, n, BasisKind::Fourier).unwrap();
        assert!((one.determinant() + 1.0).abs() < 1e-12);
        for s in [0.2, 0.61] {
            for kind in [(GalerkinKind::A, BasisKind::AbstractOrthonormal), (GalerkinKind::B, BasisKind::FemHat)] {
                let m = galerkin_path_matrix(kind.0, s, 6, kind.1).unwrap();
                assert!((m.clone() - m.transpose()).abs().max() < 1e-12);
                let m2 = galerkin_path_matrix(kind.0, s + 1e-4, 6, kind.1).unwrap();
                // Entries move at rate at most 2 sup|psi_j psi_k| or 4 (1 + t) / h^2.
                assert!((m2 - m).abs().max() < 1e-4 * 300.0);
            }
        }
        // b(0) is the weighted stiffness matrix: SPD.
        let b0 = galerkin_path_matrix(GalerkinKind::B, 0.0, 7, BasisKind::FemHat).unwrap();
        assert!(b0.cholesky().is_some());
        assert!(galerkin_path_matrix(GalerkinKind::B, 0.5, 3, BasisKind::Fourier).is_err());
    }

    #[test]
    fn scans_find_singular_points() {
        let grid: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0).collect();
        let one = singularity_scan(GalerkinKind::A, 1, BasisKind::Fourier, &grid, 1e-12).unwrap();
        assert!((one.s_star - 0.5).abs() < 1e-9);
        let odd: Vec<f64> = (0..=41).map(|i| i as f64 / 41.0).collect();
        let one = singularity_scan(GalerkinKind::A, 1, BasisKind::Fourier, &odd, 1e-12).unwrap();
        assert!((one.s_star - 0.5).abs() < 1e-9);
        let five = singularity_scan(GalerkinKind::A, 5, BasisKind::Fourier, &odd, 1e-13).unwrap();
        assert_eq!(five.endpoint_signs, (1, -1));
        assert!(five.det_at_star.abs() < 1e-10);
        let hats = singularity_scan(GalerkinKind::B, 7, BasisKind::FemHat, &odd, 1e-14).unwrap();
        assert_eq!(hats.endpoint_signs, (1, -1));
        assert!(hats.min_sv_at_star < 1e-8);
        assert!(five.to_csv().starts_with("s,det,min_sv\n"));
    }

    #[test]
    fn multiplication_is_isometric() {
        let coeffs = [0.3, -1.2, 0.5, 0.25, -0.7];
        for s in [0.0, 0.21, 0.5, 0.93, 1.0] {
            assert!(isometry_defect(s, &coeffs, BasisKind::Fourier) < 1e-12);
        }
    }
}
