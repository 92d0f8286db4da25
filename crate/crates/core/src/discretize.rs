//! The linear discretization `F_V = P_V o F|_V` and its error contracts:
//! approximation error, uniform error on balls, weak error, convergence
//! scans, continuity probes and orientation tracking along operator paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{prefix_jacobian, Map, Perturbed};
use crate::monotone::{pairwise_alpha_on, JACOBIAN_STEP, SAMPLE_DECAY};
use crate::operators::FiniteRankOperator;
use crate::report::fmt_float;
use crate::spectral_core::{project, sample_ball, SpectralVector, Subspace};

/// Bracket width for orientation crossings.
pub const CROSSING_TOL: f64 = 1e-7;

/// `F_V(x) = P_V F(P_V x)`.
pub struct DiscretizedMap<'a> {
    source: &'a dyn Map,
    subspace: Subspace,
}

impl<'a> DiscretizedMap<'a> {
    pub fn subspace(&self) -> Subspace {
        self.subspace
    }

    pub fn source(&self) -> &'a dyn Map {
        self.source
    }
}

impl Map for DiscretizedMap<'_> {
    fn dim(&self) -> usize {
        self.source.dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        project(&self.source.apply(&project(x, &self.subspace)), &self.subspace)
    }
}

pub fn linearize<'a>(f: &'a dyn Map, v: Subspace) -> DiscretizedMap<'a> {
    DiscretizedMap { source: f, subspace: v }
}

/// Seeded ambient ball samples projected onto `V`; nested prefixes share draws.
pub fn subspace_samples(dim: usize, v: &Subspace, r: f64, n: usize, seed: u64) -> Vec<SpectralVector> {
    sample_ball(dim, r, n, SAMPLE_DECAY, seed)
        .iter()
        .map(|x| project(x, v))
        .collect()
}

fn max_over<F>(samples: &[SpectralVector], f: F) -> f64
where
    F: Fn(&SpectralVector) -> f64 + Sync + Send,
{
    samples.par_iter().map(f).reduce(|| 0.0, f64::max)
}

/// `max |F_V(x) - P_V F(x)|` over samples in `V`; vanishes for the linear discretization.
pub fn epsilon_error(f: &dyn Map, v: &Subspace, samples: &[SpectralVector]) -> f64 {
    let fv = linearize(f, *v);
    max_over(samples, |x| fv.apply(x).distance(&project(&f.apply(x), v)))
}

/// `max |F_V(x) - F(x)|` over seeded samples in `B(0, r) ∩ V`.
pub fn functor_a_error(f: &dyn Map, v: &Subspace, r: f64, n: usize, seed: u64) -> f64 {
    functor_a_error_on(f, v, &subspace_samples(f.dim(), v, r, n, seed))
}

pub fn functor_a_error_on(f: &dyn Map, v: &Subspace, samples: &[SpectralVector]) -> f64 {
    let fv = linearize(f, *v);
    max_over(samples, |x| fv.apply(x).distance(&f.apply(x)))
}

/// `max |<F_V(x) - F(x), y>|` over probes `y` and seeded samples in `B(0, r) ∩ V`.
pub fn weak_error(
    f: &dyn Map,
    v: &Subspace,
    r: f64,
    probes: &[SpectralVector],
    n: usize,
    seed: u64,
) -> Result<f64> {
    weak_error_on(f, v, probes, &subspace_samples(f.dim(), v, r, n, seed))
}

pub fn weak_error_on(f: &dyn Map, v: &Subspace, probes: &[SpectralVector], samples: &[SpectralVector]) -> Result<f64> {
    if probes.iter().any(|y| y.norm() == 0.0) {
        return Err(Error::invalid("weak-error probes must be nonzero"));
    }
    let fv = linearize(f, *v);
    Ok(max_over(samples, |x| {
        let diff = &fv.apply(x) - &f.apply(x);
        probes.iter().map(|y| diff.dot(y).abs()).fold(0.0, f64::max)
    }))
}

/// Seeded unit probes with damped coefficients.
pub fn default_probes(dim: usize, count: usize, seed: u64) -> Vec<SpectralVector> {
    sample_ball(dim, 1.0, count, SAMPLE_DECAY, seed)
        .into_iter()
        .map(|y| y.scale(1.0 / y.norm()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub dim: usize,
    pub functor_a_error: f64,
    pub epsilon_error: f64,
    pub weak_error: f64,
    pub alpha_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub description: String,
    pub ambient_dim: usize,
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub metadata: ScanMetadata,
}

pub const CONVERGENCE_HEADER: &str = "dim,functor_a_error,epsilon_error,weak_error,alpha_hat";

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CONVERGENCE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.dim,
                fmt_float(r.functor_a_error),
                fmt_float(r.epsilon_error),
                fmt_float(r.weak_error),
                fmt_float(r.alpha_hat)
            ));
        }
        out
    }

    /// Whether `functor_a_error` strictly decreases across the scan.
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].functor_a_error < w[0].functor_a_error)
    }

    /// Final error below `threshold` and strictly decreasing.
    pub fn converged(&self, threshold: f64) -> bool {
        self.strictly_decreasing() && self.rows.last().is_some_and(|r| r.functor_a_error < threshold)
    }

    pub fn max_epsilon_error(&self) -> f64 {
        self.rows.iter().map(|r| r.epsilon_error).fold(0.0, f64::max)
    }
}

/// One row per prefix dimension, all computed on the same seeded draws.
pub fn convergence_scan(
    f: &dyn Map,
    dims: &[usize],
    r: f64,
    n: usize,
    seed: u64,
    probes: &[SpectralVector],
    description: &str,
) -> Result<ConvergenceReport> {
    if dims.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("scan dimensions must be strictly ascending"));
    }
    if dims.last().is_some_and(|d| *d > f.dim()) {
        return Err(Error::invalid("scan dimension exceeds the ambient dimension"));
    }
    let ambient = sample_ball(f.dim(), r, n, SAMPLE_DECAY, seed);
    let rows = dims
        .iter()
        .map(|&d| {
            let v = Subspace::prefix(d);
            let samples: Vec<SpectralVector> = ambient.iter().map(|x| project(x, &v)).collect();
            let fv = linearize(f, v);
            let alpha_hat = if n >= 2 {
                pairwise_alpha_on(&fv, &samples, r, seed)?.alpha
            } else {
                f64::NAN
            };
            Ok(ConvergenceRow {
                dim: d,
                functor_a_error: functor_a_error_on(f, &v, &samples),
                epsilon_error: epsilon_error(f, &v, &samples),
                weak_error: if probes.is_empty() { 0.0 } else { weak_error_on(f, &v, probes, &samples)? },
                alpha_hat,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport {
        rows,
        metadata: ScanMetadata {
            description: description.to_string(),
            ambient_dim: f.dim(),
            radius: r,
            samples: n,
            seed,
            probes: probes.len(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub j: usize,
    pub ambient_error: f64,
    pub discretized_error: f64,
}

/// Errors between `F` and `F + K / j`, in the ambient space and after discretization.
pub fn continuity_probe(
    f: &dyn Map,
    k: &FiniteRankOperator,
    js: &[usize],
    v: &Subspace,
    r: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<ContinuityRow>> {
    if js.contains(&0) {
        return Err(Error::invalid("perturbation indices start at 1"));
    }
    let ambient = sample_ball(f.dim(), r, n, SAMPLE_DECAY, seed);
    let in_v: Vec<SpectralVector> = ambient.iter().map(|x| project(x, v)).collect();
    let fv = linearize(f, *v);
    Ok(js
        .iter()
        .map(|&j| {
            let fj = Perturbed {
                base: f,
                perturbation: k,
                weight: 1.0 / j as f64,
            };
            let fjv = linearize(&fj, *v);
            ContinuityRow {
                j,
                ambient_error: max_over(&ambient, |x| f.apply(x).distance(&fj.apply(x))),
                discretized_error: max_over(&in_v, |x| fv.apply(x).distance(&fjv.apply(x))),
            }
        })
        .collect())
}

/// A one-parameter family of maps `t -> F_t`.
pub trait MapPath: Sync {
    fn dim(&self) -> usize;
    fn apply_at(&self, t: f64, x: &SpectralVector) -> SpectralVector;
}

pub struct FnPath<F> {
    dim: usize,
    f: F,
}

impl<F> FnPath<F>
where
    F: Fn(f64, &SpectralVector) -> SpectralVector + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnPath { dim, f }
    }
}

impl<F> MapPath for FnPath<F>
where
    F: Fn(f64, &SpectralVector) -> SpectralVector + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply_at(&self, t: f64, x: &SpectralVector) -> SpectralVector {
        (self.f)(t, x)
    }
}

struct AtTime<'a> {
    path: &'a dyn MapPath,
    t: f64,
}

impl Map for AtTime<'_> {
    fn dim(&self) -> usize {
        self.path.dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        self.path.apply_at(self.t, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationRow {
    pub t: f64,
    pub sign: i8,
    pub abs_det: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationScan {
    pub rows: Vec<OrientationRow>,
    /// Brackets `[lo, hi]` of each sign change, narrower than [`CROSSING_TOL`].
    pub crossings: Vec<(f64, f64)>,
}

fn det_at(path: &dyn MapPath, t: f64, v: &Subspace, base: &SpectralVector) -> Result<f64> {
    let jac = prefix_jacobian(&AtTime { path, t }, base, v.dim, JACOBIAN_STEP);
    let det = jac.determinant();
    if det.is_finite() {
        Ok(det)
    } else {
        Err(Error::Numerical(format!("non-finite Jacobian at t = {t}")))
    }
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Sign of `det D(P_V F_t|_V)` at `base` along `t_grid`, with crossings bracketed by bisection.
pub fn orientation_scan(
    path: &dyn MapPath,
    t_grid: &[f64],
    v: &Subspace,
    base: &SpectralVector,
) -> Result<OrientationScan> {
    if v.dim > 50 {
        return Err(Error::invalid("orientation scans need a prefix of dimension at most 50"));
    }
    let dets = t_grid
        .par_iter()
        .map(|&t| det_at(path, t, v, base))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<OrientationRow> = t_grid
        .iter()
        .zip(&dets)
        .map(|(&t, &d)| OrientationRow {
            t,
            sign: sign_of(d),
            abs_det: d.abs(),
        })
        .collect();
    let nonzero: Vec<&OrientationRow> = rows.iter().filter(|r| r.sign != 0).collect();
    let mut crossings = Vec::new();
    for w in nonzero.windows(2) {
        if w[0].sign == w[1].sign {
            continue;
        }
        let (mut lo, mut hi) = (w[0].t, w[1].t);
        let s_lo = w[0].sign;
        while hi - lo >= CROSSING_TOL {
            let mid = 0.5 * (lo + hi);
            let s = sign_of(det_at(path, mid, v, base)?);
            if s == 0 {
                lo = mid;
                hi = mid;
                break;
            }
            if s == s_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        crossings.push((lo, hi));
    }
    Ok(OrientationScan { rows, crossings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{make_layer, Frame, GKind, LayerSpec};
    use crate::map::IdentityMap;
    use crate::operators::{LinearOperatorExpr, PointwiseActivation};
    use crate::spectral_core::Space;
    use std::sync::Arc;

    fn decaying_layer(m: usize, rank: usize, frame: Frame) -> crate::layers::NeuralOperatorLayer {
        make_layer(
            Arc::new(Space::fourier(m)),
            7,
            &LayerSpec {
                rank,
                decay: 2.0,
                lip_g: 0.4,
                g: GKind::Nemytskii {
                    activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 },
                },
                support: None,
                frame,
            },
        )
        .unwrap()
    }

    #[test]
    fn linearize_examples() {
        let id = IdentityMap(8);
        let v = Subspace::prefix(3);
        let x = &subspace_samples(8, &v, 1.0, 1, 1)[0];
        assert_eq!(&linearize(&id, v).apply(x), x);
        let refl = LinearOperatorExpr::reflection_e1(8);
        let rm = refl.as_map(8).unwrap();
        assert_eq!(linearize(&rm, v).apply(x), refl.apply(x).unwrap());
        let t = FiniteRankOperator::aligned(8, vec![1.0], 4, 4).unwrap();
        let layer = crate::layers::NeuralOperatorLayer::new(
            Arc::new(Space::fourier(8)),
            t.clone(),
            t,
            crate::layers::Nonlinearity::Nemytskii {
                activation: PointwiseActivation::Identity,
                scale: 0.3,
            },
        )
        .unwrap();
        assert_eq!(&linearize(&layer, v).apply(x), x);
    }

    #[test]
    fn error_examples() {
        let id = IdentityMap(10);
        let v = Subspace::prefix(4);
        assert_eq!(functor_a_error(&id, &v, 1.0, 16, 1), 0.0);
        let probes = default_probes(10, 3, 2);
        assert_eq!(weak_error(&id, &v, 1.0, &probes, 16, 1).unwrap(), 0.0);
        let layer = decaying_layer(16, 4, Frame::Aligned);
        assert!(functor_a_error(&layer, &Subspace::prefix(4), 1.0, 32, 1) <= 1e-15);
        let inside = vec![SpectralVector::unit(16, 1)];
        assert_eq!(weak_error(&layer, &Subspace::prefix(2), 1.0, &inside, 16, 3).unwrap(), 0.0);
        assert!(weak_error(&layer, &v, 1.0, &[SpectralVector::zeros(16)], 4, 3).is_err());
    }

    #[test]
    fn decaying_layer_errors_decrease_below_tail_bound() {
        let layer = decaying_layer(32, 32, Frame::Aligned);
        let mut prev = f64::INFINITY;
        for d in [2usize, 4, 8, 16] {
            let v = Subspace::prefix(d);
            let err = functor_a_error(&layer, &v, 1.0, 32, 4);
            // |(I - P_d) T2 G(T1 x)| <= omega_{d+1} Lip(G) |T1 x| for G(0) = 0.
            let bound = ((d + 1) as f64).powi(-2) * 0.4 * 1.0;
            assert!(err <= bound + 1e-12, "d={d}: {err} > {bound}");
            assert!(err <= prev);
            prev = err;
        }
    }

    #[test]
    fn scan_on_identity_and_csv() {
        let id = IdentityMap(12);
        let report = convergence_scan(&id, &[2, 4, 8], 1.0, 16, 3, &default_probes(12, 2, 1), "identity").unwrap();
        for r in &report.rows {
            assert_eq!((r.functor_a_error, r.epsilon_error, r.weak_error), (0.0, 0.0, 0.0));
            assert!((r.alpha_hat - 1.0).abs() < 1e-14);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with(CONVERGENCE_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(convergence_scan(&id, &[4, 2], 1.0, 4, 3, &[], "").is_err());
    }

    #[test]
    fn continuity_examples() {
        let layer = decaying_layer(12, 6, Frame::Random);
        let zero = FiniteRankOperator::zero(12);
        let rows = continuity_probe(&layer, &zero, &[1, 2, 3], &Subspace::prefix(5), 1.0, 8, 1).unwrap();
        assert!(rows.iter().all(|r| r.ambient_error == 0.0 && r.discretized_error == 0.0));
        let k = FiniteRankOperator::seeded(12, vec![1.0, 0.5], 12, 3).unwrap();
        let rows = continuity_probe(&layer, &k, &[1, 2, 3, 4], &Subspace::prefix(5), 1.0, 8, 1).unwrap();
        for w in rows.windows(2) {
            let ratio = w[1].discretized_error / w[0].discretized_error;
            let expect = w[0].j as f64 / w[1].j as f64;
            assert!((ratio / expect - 1.0).abs() < 1e-8);
        }
        assert!(rows.iter().all(|r| r.discretized_error <= r.ambient_error));
    }

    #[test]
    fn orientation_examples() {
        let base = SpectralVector::zeros(6);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let constant = FnPath::new(6, |_t, x: &SpectralVector| x.clone());
        let scan = orientation_scan(&constant, &grid, &Subspace::prefix(3), &base).unwrap();
        assert!(scan.rows.iter().all(|r| r.sign == 1) && scan.crossings.is_empty());
        let flip = FnPath::new(6, |t, x: &SpectralVector| x.scale(1.0 - 2.0 * t));
        let odd_grid: Vec<f64> = (0..=21).map(|i| i as f64 / 21.0).collect();
        let scan = orientation_scan(&flip, &odd_grid, &Subspace::prefix(3), &base).unwrap();
        assert_eq!(scan.crossings.len(), 1);
        let (lo, hi) = scan.crossings[0];
        assert!(hi - lo < 1e-6 && (lo - 0.5).abs() < 1e-6);
    }
}
