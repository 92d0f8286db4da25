//! Truncated model of `L2(0,1)`: orthonormal bases, coefficient vectors,
//! prefix projections, the encoder/decoder pair, quadrature and ball sampling.
//!
//! Basis indices are zero-based in code; index 0 is always the constant
//! function.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Gauss-Legendre points per quadrature panel.
pub const POINTS_PER_PANEL: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// `1, sqrt2 cos(2 pi k t), sqrt2 sin(2 pi k t)`.
    Fourier,
    /// Piecewise-linear hats; only meaningful inside `galerkin_fem`.
    FemHat,
    /// Orthonormal shifted Legendre polynomials.
    AbstractOrthonormal,
}

/// The `"space"` block of an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub basis: BasisKind,
    pub ambient_dim: usize,
    /// Number of quadrature panels; defaults to `4 * ambient_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature: Option<usize>,
}

impl BasisSpec {
    pub fn fourier(ambient_dim: usize) -> Self {
        BasisSpec {
            basis: BasisKind::Fourier,
            ambient_dim,
            quadrature: None,
        }
    }

    pub fn panels(&self) -> usize {
        self.quadrature.unwrap_or(4 * self.ambient_dim)
    }
}

/// Evaluates basis function `index` at `t`.
pub fn basis_value(kind: BasisKind, index: usize, t: f64) -> f64 {
    match kind {
        BasisKind::Fourier => {
            if index == 0 {
                1.0
            } else {
                let k = index.div_ceil(2) as f64;
                let arg = 2.0 * std::f64::consts::PI * k * t;
                if index % 2 == 1 {
                    std::f64::consts::SQRT_2 * arg.cos()
                } else {
                    std::f64::consts::SQRT_2 * arg.sin()
                }
            }
        }
        BasisKind::AbstractOrthonormal => {
            let s = 2.0 * t - 1.0;
            let (mut p0, mut p1) = (1.0, s);
            let p = match index {
                0 => 1.0,
                1 => s,
                _ => {
                    for n in 1..index {
                        let nf = n as f64;
                        let p2 = ((2.0 * nf + 1.0) * s * p1 - nf * p0) / (nf + 1.0);
                        p0 = p1;
                        p1 = p2;
                    }
                    p1
                }
            };
            p * ((2 * index + 1) as f64).sqrt()
        }
        BasisKind::FemHat => f64::NAN,
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; points];
    let mut weights = vec![0.0; points];
    let n = points as f64;
    for i in 0..points.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..points {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            let (pn, pn1) = if points == 1 { (x, 1.0) } else { (p1, p0) };
            dp = n * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[points - 1 - i] = x;
        weights[i] = w;
        weights[points - 1 - i] = w;
    }
    if points % 2 == 1 {
        nodes[points / 2] = 0.0;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre rule on `[a, b]` with `panels` equal panels.
pub fn composite_rule(a: f64, b: f64, panels: usize, points: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(points);
    let width = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * points);
    let mut weights = Vec::with_capacity(panels * points);
    for p in 0..panels {
        let left = a + width * p as f64;
        for (x, w) in gx.iter().zip(&gw) {
            nodes.push(left + 0.5 * width * (x + 1.0));
            weights.push(0.5 * width * w);
        }
    }
    (nodes, weights)
}

/// Coefficients of an element of the truncated space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralVector(Vec<f64>);

impl SpectralVector {
    pub fn new(coeffs: Vec<f64>) -> Self {
        SpectralVector(coeffs)
    }

    pub fn zeros(dim: usize) -> Self {
        SpectralVector(vec![0.0; dim])
    }

    /// Basis element with zero-based index `k`.
    pub fn unit(dim: usize, k: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        SpectralVector(v)
    }

    pub fn from_dvector(v: &DVector<f64>) -> Self {
        SpectralVector(v.as_slice().to_vec())
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &SpectralVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        SpectralVector(self.0.iter().map(|a| c * a).collect())
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &SpectralVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn distance(&self, other: &SpectralVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute coefficient.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

impl Add for &SpectralVector {
    type Output = SpectralVector;
    fn add(self, rhs: &SpectralVector) -> SpectralVector {
        SpectralVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &SpectralVector {
    type Output = SpectralVector;
    fn sub(self, rhs: &SpectralVector) -> SpectralVector {
        SpectralVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Mul<&SpectralVector> for f64 {
    type Output = SpectralVector;
    fn mul(self, rhs: &SpectralVector) -> SpectralVector {
        rhs.scale(self)
    }
}

impl Neg for &SpectralVector {
    type Output = SpectralVector;
    fn neg(self) -> SpectralVector {
        self.scale(-1.0)
    }
}

/// Prefix subspace spanned by the first `dim` basis elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Subspace {
    pub dim: usize,
}

impl Subspace {
    pub fn prefix(dim: usize) -> Self {
        Subspace { dim }
    }

    pub fn contains_index(&self, k: usize) -> bool {
        k < self.dim
    }

    /// Smallest prefix containing both.
    pub fn join(&self, other: &Subspace) -> Subspace {
        Subspace::prefix(self.dim.max(other.dim))
    }

    /// Largest prefix contained in both.
    pub fn meet(&self, other: &Subspace) -> Subspace {
        Subspace::prefix(self.dim.min(other.dim))
    }

    pub fn is_subspace_of(&self, other: &Subspace) -> bool {
        self.dim <= other.dim
    }
}

pub fn inner(a: &SpectralVector, b: &SpectralVector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(a.dot(b))
}

/// Orthogonal projection onto a prefix subspace.
pub fn project(x: &SpectralVector, v: &Subspace) -> SpectralVector {
    let mut out = x.clone();
    for c in out.coeffs_mut().iter_mut().skip(v.dim) {
        *c = 0.0;
    }
    out
}

/// `E_N`: the first `n` coefficients.
pub fn encode(x: &SpectralVector, n: usize) -> Result<Vec<f64>> {
    if n > x.dim() {
        return Err(Error::invalid(format!(
            "cannot encode {n} coefficients of a {}-dimensional vector",
            x.dim()
        )));
    }
    Ok(x.coeffs()[..n].to_vec())
}

/// `D_N`: embeds `alpha` as the leading coefficients of an ambient vector.
pub fn decode(alpha: &[f64], ambient_dim: usize) -> Result<SpectralVector> {
    if alpha.len() > ambient_dim {
        return Err(Error::invalid(format!(
            "cannot decode {} coefficients into dimension {ambient_dim}",
            alpha.len()
        )));
    }
    let mut v = vec![0.0; ambient_dim];
    v[..alpha.len()].copy_from_slice(alpha);
    Ok(SpectralVector(v))
}

/// Seeded samples from the closed ball of radius `r`.
///
/// Directions are Gaussian with coefficient `k` damped by `(k+1)^-decay`;
/// radii are `r * u` with `u` uniform on `(0, 1]`.
pub fn sample_ball(dim: usize, r: f64, n: usize, decay: f64, seed: u64) -> Vec<SpectralVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim)
            .map(|k| rng.sample::<f64, _>(StandardNormal) * ((k + 1) as f64).powf(-decay))
            .collect();
        let radius = r * (1.0 - rng.gen::<f64>());
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-300 {
            continue;
        }
        for a in v.iter_mut() {
            *a *= radius / norm;
        }
        out.push(SpectralVector(v));
    }
    out
}

/// An orthonormal basis with its quadrature grid.
#[derive(Clone, Debug)]
pub struct Space {
    spec: BasisSpec,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Basis values, grid point by basis index.
    synthesis: DMatrix<f64>,
    /// Transpose of `synthesis` with quadrature weights folded in.
    analysis: DMatrix<f64>,
}

impl Space {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        if spec.ambient_dim == 0 {
            return Err(Error::invalid("ambient_dim must be positive"));
        }
        if spec.basis == BasisKind::FemHat {
            return Err(Error::invalid(
                "fem_hat is not orthonormal; hat bases live in galerkin_fem",
            ));
        }
        let panels = spec.panels();
        if spec.basis == BasisKind::Fourier && panels < 4 * spec.ambient_dim {
            return Err(Error::invalid(format!(
                "fourier basis needs at least {} quadrature panels, got {panels}",
                4 * spec.ambient_dim
            )));
        }
        if panels == 0 {
            return Err(Error::invalid("quadrature must be positive"));
        }
        let (nodes, weights) = composite_rule(0.0, 1.0, panels, POINTS_PER_PANEL);
        let m = spec.ambient_dim;
        let synthesis =
            DMatrix::from_fn(nodes.len(), m, |g, k| basis_value(spec.basis, k, nodes[g]));
        let analysis = DMatrix::from_fn(m, nodes.len(), |k, g| synthesis[(g, k)] * weights[g]);
        Ok(Space {
            spec,
            nodes,
            weights,
            synthesis,
            analysis,
        })
    }

    pub fn fourier(ambient_dim: usize) -> Self {
        Space::new(BasisSpec::fourier(ambient_dim)).expect("valid fourier space")
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.ambient_dim
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Whether basis index 0 is the constant function `1`.
    pub fn has_constant_first(&self) -> bool {
        matches!(
            self.spec.basis,
            BasisKind::Fourier | BasisKind::AbstractOrthonormal
        )
    }

    pub fn to_grid(&self, x: &SpectralVector) -> Vec<f64> {
        (&self.synthesis * x.to_dvector()).as_slice().to_vec()
    }

    pub fn from_grid(&self, values: &[f64]) -> SpectralVector {
        let v = DVector::from_column_slice(values);
        SpectralVector::from_dvector(&(&self.analysis * v))
    }

    /// Quadrature Gram matrix of the basis.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.analysis * &self.synthesis
    }

    /// Quadrature approximation of `int_0^1 f(t) dt`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    pub fn sample_ball(&self, r: f64, n: usize, decay: f64, seed: u64) -> Vec<SpectralVector> {
        sample_ball(self.dim(), r, n, decay, seed)
    }
}
