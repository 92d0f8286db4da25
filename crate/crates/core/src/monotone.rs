//! Strong monotonicity, bilipschitz and coercivity: sampled estimates and
//! sufficient-condition certificates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::NeuralOperatorLayer;
use crate::linalg::min_sym_eig;
use crate::map::{prefix_jacobian, Map};
use crate::operators::{LinearOperatorExpr, PointwiseActivation};
use crate::spectral_core::{project, sample_ball, SpectralVector, Subspace};

/// Coefficient damping used for all ball samples.
pub const SAMPLE_DECAY: f64 = 1.0;
/// Pairs closer than this are skipped.
pub const DEGENERATE_DISTANCE: f64 = 1e-12;
/// Central-difference step for Jacobian scans.
pub const JACOBIAN_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMethod {
    Sampled,
    SmallGain,
    LinearEig,
    Nemytskii,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMarker {
    Global,
}

/// Either `"global"` or a ball radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BallRadius {
    Global(GlobalMarker),
    Radius(f64),
}

impl BallRadius {
    pub const GLOBAL: BallRadius = BallRadius::Global(GlobalMarker::Global);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicityCertificate {
    pub alpha: f64,
    pub method: CertificateMethod,
    pub ball_radius: BallRadius,
    pub sample_count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// For sampled certificates, the pair attaining the minimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimizing_pair: Option<(SpectralVector, SpectralVector)>,
}

impl MonotonicityCertificate {
    fn proof(alpha: f64, method: CertificateMethod, ball_radius: BallRadius) -> Self {
        MonotonicityCertificate {
            alpha,
            method,
            ball_radius,
            sample_count: 0,
            seed: None,
            minimizing_pair: None,
        }
    }

    pub fn is_certified(&self) -> bool {
        self.alpha > 0.0
    }

    /// SHA-256 of the JSON form, used to reference certificates from reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("certificate serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A certificate or the reason it was refused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CertificateOutcome {
    Certified(MonotonicityCertificate),
    Rejected { reason: String, ratio: Option<f64> },
}

impl CertificateOutcome {
    pub fn alpha(&self) -> Option<f64> {
        match self {
            CertificateOutcome::Certified(c) => Some(c.alpha),
            CertificateOutcome::Rejected { .. } => None,
        }
    }

    pub fn is_certified(&self) -> bool {
        self.alpha().is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilipschitzEstimate {
    pub c_lower: f64,
    pub c_upper: f64,
    pub ball_radius: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl BilipschitzEstimate {
    pub fn is_valid(&self) -> bool {
        self.c_lower > 0.0 && self.c_lower <= self.c_upper
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianScan {
    pub min_sym_eig: f64,
    pub min_det: f64,
}

fn images(f: &dyn Map, samples: &[SpectralVector]) -> Vec<SpectralVector> {
    samples.par_iter().map(|x| f.apply(x)).collect()
}

/// Minimum of `<F(a) - F(b), a - b> / |a - b|^2` with the attaining pair indices.
fn min_pair_quotient(samples: &[SpectralVector], values: &[SpectralVector]) -> Option<(f64, usize, usize)> {
    (0..samples.len())
        .into_par_iter()
        .filter_map(|i| {
            let mut best: Option<(f64, usize, usize)> = None;
            for j in i + 1..samples.len() {
                let dx = &samples[i] - &samples[j];
                let d2 = dx.norm_sq();
                if d2.sqrt() < DEGENERATE_DISTANCE {
                    continue;
                }
                let q = (&values[i] - &values[j]).dot(&dx) / d2;
                if best.is_none_or(|b| q < b.0) {
                    best = Some((q, i, j));
                }
            }
            best
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))))
}

/// Sampled strong-monotonicity estimate on explicit samples.
pub fn pairwise_alpha_on(f: &dyn Map, samples: &[SpectralVector], radius: f64, seed: u64) -> Result<MonotonicityCertificate> {
    if samples.len() < 2 {
        return Err(Error::invalid("pairwise_alpha needs at least two samples"));
    }
    let values = images(f, samples);
    let (alpha, i, j) =
        min_pair_quotient(samples, &values).ok_or_else(|| Error::invalid("all sample pairs are degenerate"))?;
    Ok(MonotonicityCertificate {
        alpha,
        method: CertificateMethod::Sampled,
        ball_radius: BallRadius::Radius(radius),
        sample_count: samples.len(),
        seed: Some(seed),
        minimizing_pair: Some((samples[i].clone(), samples[j].clone())),
    })
}

/// Sampled strong-monotonicity estimate over `n` seeded samples in `B(0, r)`.
///
/// This is an upper bound on the true constant on the ball.
pub fn pairwise_alpha(f: &dyn Map, r: f64, n: usize, seed: u64) -> Result<MonotonicityCertificate> {
    if r <= 0.0 {
        return Err(Error::invalid("radius must be positive"));
    }
    let samples = sample_ball(f.dim(), r, n, SAMPLE_DECAY, seed);
    pairwise_alpha_on(f, &samples, r, seed)
}

/// Certificate from `Lip(G) ||T1|| ||T2|| <= 1/2`, which gives `alpha = 1/2`.
pub fn small_gain_certificate(layer: &NeuralOperatorLayer) -> Result<CertificateOutcome> {
    let (n1, n2) = (layer.t1.norm(), layer.t2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(CertificateOutcome::Certified(MonotonicityCertificate::proof(
            1.0,
            CertificateMethod::SmallGain,
            BallRadius::GLOBAL,
        )));
    }
    let lip = layer.g_lipschitz();
    if !lip.is_finite() {
        return Err(Error::invalid("layer has no Lipschitz certificate for G"));
    }
    let ratio = lip.bound * n1 * n2;
    if ratio > 0.5 {
        return Ok(CertificateOutcome::Rejected {
            reason: format!("Lip(G) ||T1|| ||T2|| = {ratio} exceeds 1/2"),
            ratio: Some(ratio),
        });
    }
    let ball = match lip.radius {
        None => BallRadius::GLOBAL,
        Some(r) => BallRadius::Radius(r / n1),
    };
    Ok(CertificateOutcome::Certified(MonotonicityCertificate::proof(
        0.5,
        CertificateMethod::SmallGain,
        ball,
    )))
}

/// Smallest eigenvalue of the symmetric part on a prefix of dimension at least `d`,
/// combined with the identity tail.
pub fn linear_certificate(a: &LinearOperatorExpr, d: usize) -> Result<CertificateOutcome> {
    let alpha = match a {
        LinearOperatorExpr::Identity => 1.0,
        LinearOperatorExpr::Scalar { c } => *c,
        LinearOperatorExpr::Diagonal { entries } => {
            let head = entries.iter().take(d.max(entries.len())).copied().fold(f64::INFINITY, f64::min);
            head.min(1.0)
        }
        LinearOperatorExpr::DenseOnPrefix { matrix } => {
            let dim = d.max(matrix.nrows());
            min_sym_eig(&a.matrix(dim)?).min(1.0)
        }
        _ => {
            return Err(Error::invalid(
                "linear_certificate accepts identity, scalar, diagonal or dense_on_prefix operators",
            ))
        }
    };
    if alpha > 0.0 {
        Ok(CertificateOutcome::Certified(MonotonicityCertificate::proof(
            alpha,
            CertificateMethod::LinearEig,
            BallRadius::GLOBAL,
        )))
    } else {
        Ok(CertificateOutcome::Rejected {
            reason: format!("symmetric part has smallest eigenvalue {alpha}"),
            ratio: None,
        })
    }
}

/// Certificate from a positive lower bound on the activation's derivative.
pub fn nemytskii_certificate(sigma: &PointwiseActivation) -> Result<CertificateOutcome> {
    if sigma.growth().is_none() {
        return Err(Error::invalid("activation has no linear growth bound"));
    }
    let (alpha, _) = sigma.derivative_bounds();
    if alpha > 0.0 {
        Ok(CertificateOutcome::Certified(MonotonicityCertificate::proof(
            alpha,
            CertificateMethod::Nemytskii,
            BallRadius::GLOBAL,
        )))
    } else {
        Ok(CertificateOutcome::Rejected {
            reason: format!("derivative lower bound {alpha} is not positive"),
            ratio: None,
        })
    }
}

/// Sampled min and max of `|F(a) - F(b)| / |a - b|` on explicit samples.
pub fn bilipschitz_on(f: &dyn Map, samples: &[SpectralVector]) -> Result<(f64, f64)> {
    let values = images(f, samples);
    let (lo, hi) = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for j in i + 1..samples.len() {
                let d = samples[i].distance(&samples[j]);
                if d < DEGENERATE_DISTANCE {
                    continue;
                }
                let q = values[i].distance(&values[j]) / d;
                lo = lo.min(q);
                hi = hi.max(q);
            }
            (lo, hi)
        })
        .reduce(|| (f64::INFINITY, 0.0), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    if !lo.is_finite() {
        return Err(Error::invalid("no nondegenerate sample pairs"));
    }
    Ok((lo, hi))
}

pub fn bilipschitz_estimate(f: &dyn Map, r: f64, n: usize, seed: u64) -> Result<BilipschitzEstimate> {
    if n < 2 {
        return Err(Error::invalid("bilipschitz_estimate needs at least two samples"));
    }
    let samples = sample_ball(f.dim(), r, n, SAMPLE_DECAY, seed);
    let (c_lower, c_upper) = bilipschitz_on(f, &samples)?;
    Ok(BilipschitzEstimate {
        c_lower,
        c_upper,
        ball_radius: r,
        sample_count: n,
        seed,
    })
}

/// Smallest symmetric-part eigenvalue and determinant of `D(P_V F|_V)` over samples in `B_V(0, r)`.
pub fn jacobian_pd_scan(f: &dyn Map, v: &Subspace, r: f64, n: usize, seed: u64) -> Result<JacobianScan> {
    if v.dim > 50 || v.dim > f.dim() {
        return Err(Error::invalid("jacobian scans need a prefix of dimension at most 50"));
    }
    let samples: Vec<SpectralVector> = sample_ball(f.dim(), r, n, SAMPLE_DECAY, seed)
        .iter()
        .map(|x| project(x, v))
        .collect();
    let results: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|x| {
            let jac = prefix_jacobian(f, x, v.dim, JACOBIAN_STEP);
            (min_sym_eig(&jac), jac.determinant())
        })
        .collect();
    if results.iter().any(|(e, d)| !e.is_finite() || !d.is_finite()) {
        return Err(Error::Numerical("non-finite Jacobian entries".into()));
    }
    Ok(JacobianScan {
        min_sym_eig: results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
        min_det: results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
    })
}

/// Smallest slack of `<F(x) - F(0), x/|x|> - alpha |x|` over seeded directions at each radius.
pub fn coercivity_probe(f: &dyn Map, alpha: f64, radii: &[f64], n: usize, seed: u64) -> f64 {
    let dim = f.dim();
    let f0 = f.apply(&SpectralVector::zeros(dim));
    let dirs = sample_ball(dim, 1.0, n, SAMPLE_DECAY, seed);
    let mut slack = f64::INFINITY;
    for &rho in radii {
        for d in &dirs {
            let u = d.scale(1.0 / d.norm());
            let fx = f.apply(&u.scale(rho));
            slack = slack.min((&fx - &f0).dot(&u) - alpha * rho);
        }
    }
    slack
}
