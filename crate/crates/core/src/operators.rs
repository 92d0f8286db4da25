//! Linear and pointwise building blocks: finite-rank operators, structured
//! linear operators, Nemytskii activations and coordinate activations.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::map::Map;
use crate::spectral_core::{SpectralVector, Space};

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Compact operator `T x = sum_p omega_p <x, psi_p> phi_p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FiniteRankDoc", into = "FiniteRankDoc")]
pub struct FiniteRankOperator {
    dim: usize,
    omegas: Vec<f64>,
    inputs: Vec<SpectralVector>,
    outputs: Vec<SpectralVector>,
}

/// JSON form: explicit `psi`/`phi` arrays or seeds for random orthonormal
/// families supported on the first `support` coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteRankDoc {
    pub kind: String,
    pub dim: usize,
    pub omegas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<SpectralVector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<SpectralVector>>,
}

impl TryFrom<FiniteRankDoc> for FiniteRankOperator {
    type Error = Error;

    fn try_from(doc: FiniteRankDoc) -> Result<Self> {
        if doc.kind != "finite_rank" {
            return Err(Error::invalid(format!("unknown operator kind {:?}", doc.kind)));
        }
        let rank = doc.omegas.len();
        let support = doc.support.unwrap_or(doc.dim);
        let family = |explicit: Option<Vec<SpectralVector>>, seed: Option<u64>, name: &str| {
            match (explicit, seed) {
                (Some(v), None) => Ok(v),
                (None, Some(s)) => {
                    linalg::random_orthonormal(&mut ChaCha8Rng::seed_from_u64(s), doc.dim, rank, support)
                }
                _ => Err(Error::invalid(format!(
                    "exactly one of {name} or {name}_seed is required"
                ))),
            }
        };
        let inputs = family(doc.psi, doc.psi_seed, "psi")?;
        let outputs = family(doc.phi, doc.phi_seed, "phi")?;
        FiniteRankOperator::new(doc.dim, doc.omegas, inputs, outputs)
    }
}

impl From<FiniteRankOperator> for FiniteRankDoc {
    fn from(op: FiniteRankOperator) -> Self {
        FiniteRankDoc {
            kind: "finite_rank".into(),
            dim: op.dim,
            omegas: op.omegas,
            support: None,
            psi_seed: None,
            phi_seed: None,
            psi: Some(op.inputs),
            phi: Some(op.outputs),
        }
    }
}

fn check_orthonormal(family: &[SpectralVector], name: &str) -> Result<()> {
    for (i, a) in family.iter().enumerate() {
        for (j, b) in family.iter().enumerate().skip(i) {
            let expect = if i == j { 1.0 } else { 0.0 };
            if (a.dot(b) - expect).abs() > ORTHONORMAL_TOL {
                return Err(Error::invalid(format!("{name} family is not orthonormal")));
            }
        }
    }
    Ok(())
}

impl FiniteRankOperator {
    pub fn new(
        dim: usize,
        omegas: Vec<f64>,
        inputs: Vec<SpectralVector>,
        outputs: Vec<SpectralVector>,
    ) -> Result<Self> {
        if inputs.len() != omegas.len() || outputs.len() != omegas.len() {
            return Err(Error::invalid("singular triples have inconsistent lengths"));
        }
        for v in inputs.iter().chain(&outputs) {
            check_dim(dim, v.dim())?;
        }
        if omegas.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("singular values must be finite and nonnegative"));
        }
        if omegas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("singular values must be nonincreasing"));
        }
        check_orthonormal(&inputs, "psi")?;
        check_orthonormal(&outputs, "phi")?;
        Ok(FiniteRankOperator {
            dim,
            omegas,
            inputs,
            outputs,
        })
    }

    pub fn zero(dim: usize) -> Self {
        FiniteRankOperator {
            dim,
            omegas: vec![],
            inputs: vec![],
            outputs: vec![],
        }
    }

    /// Random orthonormal families on the first `support` coefficients.
    pub fn seeded(dim: usize, omegas: Vec<f64>, support: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = linalg::random_orthonormal(&mut rng, dim, omegas.len(), support)?;
        let outputs = linalg::random_orthonormal(&mut rng, dim, omegas.len(), support)?;
        FiniteRankOperator::new(dim, omegas, inputs, outputs)
    }

    /// Triples `(omega_p, e_{in+p}, e_{out+p})`.
    pub fn aligned(dim: usize, omegas: Vec<f64>, input_offset: usize, output_offset: usize) -> Result<Self> {
        let rank = omegas.len();
        if input_offset + rank > dim || output_offset + rank > dim {
            return Err(Error::Infeasible(format!("rank {rank} does not fit in dimension {dim}")));
        }
        let inputs = (0..rank).map(|p| SpectralVector::unit(dim, input_offset + p)).collect();
        let outputs = (0..rank).map(|p| SpectralVector::unit(dim, output_offset + p)).collect();
        FiniteRankOperator::new(dim, omegas, inputs, outputs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.omegas.len()
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// The `psi` family.
    pub fn inputs(&self) -> &[SpectralVector] {
        &self.inputs
    }

    /// The `phi` family.
    pub fn outputs(&self) -> &[SpectralVector] {
        &self.outputs
    }

    /// Operator norm, the leading singular value.
    pub fn norm(&self) -> f64 {
        self.omegas.first().copied().unwrap_or(0.0)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if c < 0.0 {
            return Err(Error::invalid("scale must be nonnegative"));
        }
        let mut out = self.clone();
        for w in out.omegas.iter_mut() {
            *w *= c;
        }
        Ok(out)
    }

    pub fn apply(&self, x: &SpectralVector) -> Result<SpectralVector> {
        check_dim(self.dim, x.dim())?;
        Ok(self.apply_unchecked(x))
    }

    fn apply_unchecked(&self, x: &SpectralVector) -> SpectralVector {
        let mut out = SpectralVector::zeros(self.dim);
        for ((w, psi), phi) in self.omegas.iter().zip(&self.inputs).zip(&self.outputs) {
            out.axpy(w * x.dot(psi), phi);
        }
        out
    }

    /// Adjoint `T^* y = sum_p omega_p <y, phi_p> psi_p`.
    pub fn apply_adjoint(&self, y: &SpectralVector) -> SpectralVector {
        let mut out = SpectralVector::zeros(self.dim);
        for ((w, psi), phi) in self.omegas.iter().zip(&self.inputs).zip(&self.outputs) {
            out.axpy(w * y.dot(phi), psi);
        }
        out
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for ((w, psi), phi) in self.omegas.iter().zip(&self.inputs).zip(&self.outputs) {
            m += linalg::outer(phi, psi) * *w;
        }
        m
    }

    /// Splits into the triples with `omega >= h` and the norm of the rest.
    pub fn truncate_rank(&self, h: f64) -> (FiniteRankOperator, f64) {
        let keep = self.omegas.iter().take_while(|w| **w >= h).count();
        let head = FiniteRankOperator {
            dim: self.dim,
            omegas: self.omegas[..keep].to_vec(),
            inputs: self.inputs[..keep].to_vec(),
            outputs: self.outputs[..keep].to_vec(),
        };
        (head, self.omegas.get(keep).copied().unwrap_or(0.0))
    }
}

impl Map for FiniteRankOperator {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        self.apply_unchecked(x)
    }
}

pub fn truncate_rank(t: &FiniteRankOperator, h: f64) -> (FiniteRankOperator, f64) {
    t.truncate_rank(h)
}

/// Structured bounded linear operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinearOperatorExpr {
    Identity,
    Scalar {
        c: f64,
    },
    /// Leading diagonal entries; identity beyond them.
    Diagonal {
        entries: Vec<f64>,
    },
    /// Square matrix on the leading coefficients; identity on the tail.
    DenseOnPrefix {
        #[serde(with = "linalg::rows")]
        matrix: DMatrix<f64>,
    },
    /// `x - 2 <x, e> e` for a unit vector `e`.
    Reflection {
        e: SpectralVector,
    },
    /// Factors applied in list order: the first entry acts first.
    Composition {
        factors: Vec<LinearOperatorExpr>,
    },
    Sum {
        terms: Vec<LinearOperatorExpr>,
    },
}

impl LinearOperatorExpr {
    /// Reflection through the first basis element.
    pub fn reflection_e1(dim: usize) -> Self {
        LinearOperatorExpr::Reflection {
            e: SpectralVector::unit(dim, 0),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            LinearOperatorExpr::Identity | LinearOperatorExpr::Scalar { .. } => Ok(()),
            LinearOperatorExpr::Diagonal { entries } => {
                if entries.len() > dim {
                    Err(Error::DimensionMismatch { expected: dim, got: entries.len() })
                } else {
                    Ok(())
                }
            }
            LinearOperatorExpr::DenseOnPrefix { matrix } => {
                if matrix.nrows() != matrix.ncols() {
                    Err(Error::invalid("dense_on_prefix matrix must be square"))
                } else if matrix.nrows() > dim {
                    Err(Error::DimensionMismatch { expected: dim, got: matrix.nrows() })
                } else {
                    Ok(())
                }
            }
            LinearOperatorExpr::Reflection { e } => {
                check_dim(dim, e.dim())?;
                if (e.norm() - 1.0).abs() > 1e-12 {
                    Err(Error::invalid("reflection vector must be a unit vector"))
                } else {
                    Ok(())
                }
            }
            LinearOperatorExpr::Composition { factors } => factors.iter().try_for_each(|f| f.validate(dim)),
            LinearOperatorExpr::Sum { terms } => terms.iter().try_for_each(|f| f.validate(dim)),
        }
    }

    pub fn apply(&self, x: &SpectralVector) -> Result<SpectralVector> {
        self.validate(x.dim())?;
        Ok(self.apply_unchecked(x))
    }

    fn apply_unchecked(&self, x: &SpectralVector) -> SpectralVector {
        match self {
            LinearOperatorExpr::Identity => x.clone(),
            LinearOperatorExpr::Scalar { c } => x.scale(*c),
            LinearOperatorExpr::Diagonal { entries } => {
                let mut out = x.clone();
                for (a, d) in out.coeffs_mut().iter_mut().zip(entries) {
                    *a *= d;
                }
                out
            }
            LinearOperatorExpr::DenseOnPrefix { matrix } => {
                let d = matrix.nrows();
                let head = matrix * nalgebra::DVector::from_column_slice(&x.coeffs()[..d]);
                let mut out = x.clone();
                out.coeffs_mut()[..d].copy_from_slice(head.as_slice());
                out
            }
            LinearOperatorExpr::Reflection { e } => {
                let mut out = x.clone();
                out.axpy(-2.0 * x.dot(e), e);
                out
            }
            LinearOperatorExpr::Composition { factors } => factors
                .iter()
                .fold(x.clone(), |acc, f| f.apply_unchecked(&acc)),
            LinearOperatorExpr::Sum { terms } => {
                let mut out = SpectralVector::zeros(x.dim());
                for t in terms {
                    out.axpy(1.0, &t.apply_unchecked(x));
                }
                out
            }
        }
    }

    /// Dense matrix in ambient dimension `dim`.
    pub fn matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        self.validate(dim)?;
        let mut m = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let col = self.apply_unchecked(&SpectralVector::unit(dim, k));
            m.column_mut(k).copy_from_slice(col.coeffs());
        }
        Ok(m)
    }

    /// Binds the expression to an ambient dimension as a [`Map`].
    pub fn as_map(&self, dim: usize) -> Result<LinearMap<'_>> {
        self.validate(dim)?;
        Ok(LinearMap { expr: self, dim })
    }

    /// Solves `A x = y`.
    pub fn solve(&self, y: &SpectralVector) -> Result<SpectralVector> {
        self.validate(y.dim())?;
        match self {
            LinearOperatorExpr::Identity => Ok(y.clone()),
            LinearOperatorExpr::Reflection { .. } => Ok(self.apply_unchecked(y)),
            LinearOperatorExpr::Scalar { c } if *c != 0.0 => Ok(y.scale(1.0 / c)),
            LinearOperatorExpr::Diagonal { entries } if entries.iter().all(|d| *d != 0.0) => {
                let mut out = y.clone();
                for (a, d) in out.coeffs_mut().iter_mut().zip(entries) {
                    *a /= d;
                }
                Ok(out)
            }
            _ => {
                let m = self.matrix(y.dim())?;
                m.lu()
                    .solve(&y.to_dvector())
                    .map(|v| SpectralVector::from_dvector(&v))
                    .ok_or_else(|| Error::Numerical("singular linear operator".into()))
            }
        }
    }
}

/// A [`LinearOperatorExpr`] bound to an ambient dimension.
pub struct LinearMap<'a> {
    expr: &'a LinearOperatorExpr,
    dim: usize,
}

impl Map for LinearMap<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        self.expr.apply_unchecked(x)
    }
}

/// Smooth scalar functions available as custom activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomFunction {
    Tanh,
    Softplus,
    /// `a s + b tanh(s)`.
    LinearPlusTanh { a: f64, b: f64 },
}

impl CustomFunction {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            CustomFunction::Tanh => s.tanh(),
            CustomFunction::Softplus => {
                if s > 30.0 {
                    s
                } else {
                    s.exp().ln_1p()
                }
            }
            CustomFunction::LinearPlusTanh { a, b } => a * s + b * s.tanh(),
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        match *self {
            CustomFunction::Tanh => 1.0 - s.tanh().powi(2),
            CustomFunction::Softplus => 1.0 / (1.0 + (-s).exp()),
            CustomFunction::LinearPlusTanh { a, b } => a + b * (1.0 - s.tanh().powi(2)),
        }
    }
}

/// User-supplied activation with stated bounds
/// `alpha <= sigma' <= lip` and `|sigma(s)| <= c1 |s| + c2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomActivation {
    pub function: CustomFunction,
    pub alpha: f64,
    pub lip: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CustomActivation {
    /// Attaches the analytically known bounds of `function`.
    pub fn with_bounds(function: CustomFunction) -> Self {
        let (alpha, lip, c1, c2) = match function {
            CustomFunction::Tanh => (0.0, 1.0, 0.0, 1.0),
            CustomFunction::Softplus => (0.0, 1.0, 1.0, std::f64::consts::LN_2),
            CustomFunction::LinearPlusTanh { a, b } => {
                (a.min(a + b), a.max(a + b), a.abs(), b.abs())
            }
        };
        CustomActivation {
            function,
            alpha,
            lip,
            c1,
            c2,
        }
    }

    /// Checks the stated bounds on a grid over `[-radius, radius]`.
    pub fn validate_on_grid(&self, radius: f64, points: usize) -> Result<()> {
        let tol = 1e-12;
        for i in 0..=points {
            let s = -radius + 2.0 * radius * i as f64 / points as f64;
            let d = self.function.deriv(s);
            if d < self.alpha - tol || d > self.lip + tol {
                return Err(Error::invalid(format!("derivative bound violated at s = {s}")));
            }
            if self.function.eval(s).abs() > self.c1 * s.abs() + self.c2 + tol {
                return Err(Error::invalid(format!("growth bound violated at s = {s}")));
            }
        }
        Ok(())
    }
}

/// Scalar activations applied pointwise to functions (Nemytskii operators).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointwiseActivation {
    LeakyRelu { slope_neg: f64 },
    /// `max(0, s)^3`.
    Recu,
    Identity,
    Custom(CustomActivation),
}

impl PointwiseActivation {
    pub fn relu() -> Self {
        PointwiseActivation::LeakyRelu { slope_neg: 0.0 }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            PointwiseActivation::LeakyRelu { slope_neg } => {
                if s >= 0.0 {
                    s
                } else {
                    slope_neg * s
                }
            }
            PointwiseActivation::Recu => {
                let p = s.max(0.0);
                p * p * p
            }
            PointwiseActivation::Identity => s,
            PointwiseActivation::Custom(c) => c.function.eval(s),
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        match self {
            PointwiseActivation::LeakyRelu { slope_neg } => {
                if s >= 0.0 {
                    1.0
                } else {
                    *slope_neg
                }
            }
            PointwiseActivation::Recu => 3.0 * s.max(0.0).powi(2),
            PointwiseActivation::Identity => 1.0,
            PointwiseActivation::Custom(c) => c.function.deriv(s),
        }
    }

    /// Global bounds `(lower, upper)` on the derivative; `upper` is `None` when unbounded.
    pub fn derivative_bounds(&self) -> (f64, Option<f64>) {
        match self {
            PointwiseActivation::LeakyRelu { slope_neg } => {
                (slope_neg.min(1.0), Some(slope_neg.max(1.0)))
            }
            PointwiseActivation::Recu => (0.0, None),
            PointwiseActivation::Identity => (1.0, Some(1.0)),
            PointwiseActivation::Custom(c) => (c.alpha, Some(c.lip)),
        }
    }

    /// Global Lipschitz constant, if one exists.
    pub fn lipschitz(&self) -> Option<f64> {
        match self {
            PointwiseActivation::LeakyRelu { slope_neg } => Some(slope_neg.abs().max(1.0)),
            PointwiseActivation::Recu => None,
            PointwiseActivation::Identity => Some(1.0),
            PointwiseActivation::Custom(c) => Some(c.alpha.abs().max(c.lip.abs())),
        }
    }

    /// Lipschitz constant on `[-radius, radius]`.
    pub fn lipschitz_on(&self, radius: f64) -> f64 {
        match self {
            PointwiseActivation::Recu => 3.0 * radius * radius,
            _ => self.lipschitz().unwrap_or(f64::INFINITY),
        }
    }

    /// Growth constants `(c1, c2)` with `|sigma(s)| <= c1 |s| + c2`, if linear growth holds.
    pub fn growth(&self) -> Option<(f64, f64)> {
        match self {
            PointwiseActivation::LeakyRelu { slope_neg } => Some((slope_neg.abs().max(1.0), 0.0)),
            PointwiseActivation::Recu => None,
            PointwiseActivation::Identity => Some((1.0, 0.0)),
            PointwiseActivation::Custom(c) => Some((c.c1, c.c2)),
        }
    }
}

/// Activations acting on coordinate vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordinateActivation {
    /// Sorts adjacent pairs `(a, b) -> (min, max)`; a trailing odd coordinate is kept.
    Groupsort2,
    LeakyRelu { slope_neg: f64 },
    Recu,
    Identity,
    Custom(CustomActivation),
}

impl From<PointwiseActivation> for CoordinateActivation {
    fn from(p: PointwiseActivation) -> Self {
        match p {
            PointwiseActivation::LeakyRelu { slope_neg } => CoordinateActivation::LeakyRelu { slope_neg },
            PointwiseActivation::Recu => CoordinateActivation::Recu,
            PointwiseActivation::Identity => CoordinateActivation::Identity,
            PointwiseActivation::Custom(c) => CoordinateActivation::Custom(c),
        }
    }
}

impl CoordinateActivation {
    pub fn pointwise(&self) -> Option<PointwiseActivation> {
        match *self {
            CoordinateActivation::Groupsort2 => None,
            CoordinateActivation::LeakyRelu { slope_neg } => Some(PointwiseActivation::LeakyRelu { slope_neg }),
            CoordinateActivation::Recu => Some(PointwiseActivation::Recu),
            CoordinateActivation::Identity => Some(PointwiseActivation::Identity),
            CoordinateActivation::Custom(c) => Some(PointwiseActivation::Custom(c)),
        }
    }

    pub fn apply_in_place(&self, z: &mut [f64]) {
        match self.pointwise() {
            Some(p) => z.iter_mut().for_each(|v| *v = p.eval(*v)),
            None => {
                for pair in z.chunks_exact_mut(2) {
                    if pair[0] > pair[1] {
                        pair.swap(0, 1);
                    }
                }
            }
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = z.to_vec();
        self.apply_in_place(&mut out);
        out
    }

    pub fn lipschitz(&self) -> Option<f64> {
        match self.pointwise() {
            Some(p) => p.lipschitz(),
            None => Some(1.0),
        }
    }

    pub fn is_recu(&self) -> bool {
        matches!(self, CoordinateActivation::Recu)
    }
}

/// `sigma o u` evaluated through the quadrature grid.
pub fn nemytskii_apply(space: &Space, sigma: &PointwiseActivation, u: &SpectralVector) -> Result<SpectralVector> {
    check_dim(space.dim(), u.dim())?;
    if *sigma == PointwiseActivation::Identity {
        return Ok(u.clone());
    }
    let mut grid = space.to_grid(u);
    grid.iter_mut().for_each(|v| *v = sigma.eval(*v));
    Ok(space.from_grid(&grid))
}

/// Power-iteration estimate of the operator norm of a linear map.
pub fn operator_norm_estimate(op: &dyn Map, iters: usize, seed: u64) -> Result<f64> {
    if iters < 10 {
        return Err(Error::invalid("operator_norm_estimate needs at least 10 iterations"));
    }
    let m = op.dim();
    let mut a = DMatrix::zeros(m, m);
    for k in 0..m {
        a.column_mut(k).copy_from_slice(op.apply(&SpectralVector::unit(m, k)).coeffs());
    }
    if a.abs().max() == 0.0 {
        return Ok(0.0);
    }
    let ata = a.transpose() * &a;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = linalg::random_vector(&mut rng, m);
    v /= v.norm();
    let mut estimate = 0.0;
    for it in 0..50 * iters {
        let w = &ata * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = v.dot(&w).max(0.0).sqrt();
        v = w / norm;
        let converged = (next - estimate).abs() <= 1e-15 * next.max(1.0);
        estimate = next;
        if it + 1 >= iters && converged {
            break;
        }
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::FnMap;
    use crate::spectral_core::sample_ball;

    #[test]
    fn apply_examples() {
        let refl = LinearOperatorExpr::reflection_e1(4);
        let e1 = SpectralVector::unit(4, 0);
        let e2 = SpectralVector::unit(4, 1);
        assert_eq!(refl.apply(&e1).unwrap(), e1.scale(-1.0));
        assert_eq!(refl.apply(&e2).unwrap(), e2);
        let t = FiniteRankOperator::new(4, vec![2.0], vec![e1.clone()], vec![e2.clone()]).unwrap();
        assert_eq!(t.apply(&e1).unwrap(), e2.scale(2.0));
        assert!(t.apply(&SpectralVector::zeros(3)).is_err());
        assert!(refl.apply(&SpectralVector::zeros(3)).is_err());
    }

    #[test]
    fn finite_rank_validation() {
        let e1 = SpectralVector::unit(3, 0);
        let e2 = SpectralVector::unit(3, 1);
        assert!(FiniteRankOperator::new(3, vec![1.0, 2.0], vec![e1.clone(), e2.clone()], vec![e1.clone(), e2.clone()]).is_err());
        assert!(FiniteRankOperator::new(3, vec![1.0, 1.0], vec![e1.clone(), e1.clone()], vec![e1.clone(), e2.clone()]).is_err());
        let t = FiniteRankOperator::seeded(12, vec![1.0, 0.5, 0.25], 6, 9).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: FiniteRankOperator = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let seeded: FiniteRankOperator = serde_json::from_str(
            r#"{"kind":"finite_rank","dim":8,"omegas":[1.0,0.5],"support":4,"psi_seed":1,"phi_seed":2}"#,
        )
        .unwrap();
        assert_eq!(seeded.rank(), 2);
        assert!(serde_json::from_str::<FiniteRankOperator>(
            r#"{"kind":"finite_rank","dim":8,"omegas":[1.0],"psi_seed":1,"phi_seed":2,"bogus":0}"#
        )
        .is_err());
    }

    #[test]
    fn nemytskii_examples() {
        let space = Space::fourier(9);
        let u = &sample_ball(9, 1.0, 1, 1.0, 5)[0];
        let id = nemytskii_apply(&space, &PointwiseActivation::Identity, u).unwrap();
        assert_eq!(&id, u);
        let linear = PointwiseActivation::LeakyRelu { slope_neg: 1.0 };
        assert!((&nemytskii_apply(&space, &linear, u).unwrap() - u).max_abs() < 1e-12);
        let minus_one = SpectralVector::unit(9, 0).scale(-1.0);
        let out = nemytskii_apply(&space, &PointwiseActivation::LeakyRelu { slope_neg: 0.2 }, &minus_one).unwrap();
        assert!((&out - &SpectralVector::unit(9, 0).scale(-0.2)).max_abs() < 1e-8);
    }

    #[test]
    fn norm_estimates() {
        let diag = LinearOperatorExpr::Diagonal {
            entries: (1..=8).map(|k| 1.0 / k as f64).collect(),
        };
        let m = diag.as_map(8).unwrap();
        assert!((operator_norm_estimate(&m, 20, 1).unwrap() - 1.0).abs() < 1e-6);
        let refl = LinearOperatorExpr::reflection_e1(8);
        let r = refl.as_map(8).unwrap();
        assert!((operator_norm_estimate(&r, 20, 1).unwrap() - 1.0).abs() < 1e-6);
        let t = FiniteRankOperator::seeded(8, vec![3.0, 1.0], 8, 4).unwrap();
        assert!((operator_norm_estimate(&t, 20, 1).unwrap() - 3.0).abs() < 1e-6);
        let zero = FnMap::new(4, |x: &SpectralVector| x.scale(0.0));
        assert_eq!(operator_norm_estimate(&zero, 10, 1).unwrap(), 0.0);
        assert!(operator_norm_estimate(&zero, 5, 1).is_err());
    }

    #[test]
    fn truncation_examples() {
        let t = FiniteRankOperator::aligned(6, vec![1.0, 0.1, 0.01], 0, 0).unwrap();
        let (head, tail) = t.truncate_rank(2.0);
        assert_eq!((head.rank(), tail), (0, 1.0));
        let (head, tail) = t.truncate_rank(1e-300);
        assert_eq!((head.rank(), tail), (3, 0.0));
        let (head, tail) = t.truncate_rank(0.05);
        assert_eq!((head.rank(), tail), (2, 0.01));
        let diff = FnMap::new(6, |x: &SpectralVector| &t.apply(x).unwrap() - &head.apply(x).unwrap());
        assert!((operator_norm_estimate(&diff, 20, 3).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn recu_is_c1() {
        let s = PointwiseActivation::Recu;
        assert_eq!(s.deriv(0.0), 0.0);
        for i in -20..=20 {
            let x = i as f64 * 0.1;
            let h = 1e-5;
            let fd = (s.eval(x + h) - s.eval(x - h)) / (2.0 * h);
            assert!((fd - s.deriv(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn groupsort_examples() {
        let gs = CoordinateActivation::Groupsort2;
        assert_eq!(gs.apply(&[3.0, 1.0, -1.0, 2.0, 5.0]), vec![1.0, 3.0, -1.0, 2.0, 5.0]);
        let once = gs.apply(&[2.0, -4.0, 0.5, 0.1]);
        assert_eq!(gs.apply(&once), once);
    }

    #[test]
    fn custom_bounds_hold() {
        for f in [
            CustomFunction::Tanh,
            CustomFunction::Softplus,
            CustomFunction::LinearPlusTanh { a: 0.5, b: 0.3 },
        ] {
            CustomActivation::with_bounds(f).validate_on_grid(20.0, 4000).unwrap();
        }
        let mut wrong = CustomActivation::with_bounds(CustomFunction::Tanh);
        wrong.alpha = 0.5;
        assert!(wrong.validate_on_grid(5.0, 100).is_err());
        let act: PointwiseActivation = serde_json::from_str(
            r#"{"kind":"custom","function":{"linear_plus_tanh":{"a":0.5,"b":0.25}},"alpha":0.5,"lip":0.75,"c1":0.5,"c2":0.25}"#,
        )
        .unwrap();
        assert_eq!(act.derivative_bounds(), (0.5, Some(0.75)));
    }

    #[test]
    fn dense_prefix_and_composition() {
        let a = LinearOperatorExpr::DenseOnPrefix {
            matrix: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        };
        let x = SpectralVector::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(a.apply(&x).unwrap().coeffs(), &[2.0, -1.0, 3.0]);
        let comp = LinearOperatorExpr::Composition {
            factors: vec![a.clone(), LinearOperatorExpr::Scalar { c: 2.0 }],
        };
        assert_eq!(comp.apply(&x).unwrap().coeffs(), &[4.0, -2.0, 6.0]);
        let sum = LinearOperatorExpr::Sum {
            terms: vec![LinearOperatorExpr::Identity, LinearOperatorExpr::Identity],
        };
        assert_eq!(sum.apply(&x).unwrap(), x.scale(2.0));
        assert_eq!(comp.solve(&comp.apply(&x).unwrap()).unwrap(), x);
        let json = serde_json::to_string(&comp).unwrap();
        let back: LinearOperatorExpr = serde_json::from_str(&json).unwrap();
        assert_eq!(back, comp);
    }
}
