//! Banach fixed-point inversion of residual blocks `Id + D_N NN E_N` and of
//! chains of them, plus global roundtrip checks for invertible chains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::layers::{BlockMap, CoordinateNetwork, InvertibleResidualChain, ResidualChain};
use crate::map::Map;
use crate::monotone::{pairwise_alpha_on, SAMPLE_DECAY};
use crate::operators::LinearOperatorExpr;
use crate::spectral_core::{sample_ball, SpectralVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPoint {
    /// `x_0 = y`.
    #[default]
    Target,
    /// `x_0 = 0`.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    /// Per-block residual tolerance.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub start: StartPoint,
    /// Iterates must stay in this ball; leaving it is a domain error.
    #[serde(default)]
    pub domain_radius: Option<f64>,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    10_000
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            tol: default_tol(),
            max_iter: default_max_iter(),
            start: StartPoint::default(),
            domain_radius: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub delta: f64,
    pub iterations: usize,
    /// `|x_n + NN(x_n) - y| = |x_{n+1} - x_n|` for each iterate.
    pub residuals: Vec<f64>,
    pub final_residual: f64,
    /// `ceil(log(tol (1 - delta) / |x_1 - x_0|) / log delta) + 1`.
    pub a_priori_bound: usize,
}

impl BlockTrace {
    /// Successive residual ratios.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.residuals
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }

    pub fn median_contraction(&self) -> Option<f64> {
        let mut r = self.contraction_ratios();
        if r.is_empty() {
            return None;
        }
        r.sort_by(f64::total_cmp);
        Some(r[r.len() / 2])
    }

    /// Residuals strictly decrease from the second iterate on.
    pub fn decreasing_after_first(&self) -> bool {
        self.residuals.iter().skip(1).collect::<Vec<_>>().windows(2).all(|w| w[1] < w[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionTrace {
    /// Traces in the order the blocks were inverted (last block first).
    pub blocks: Vec<BlockTrace>,
    pub tol: f64,
    pub max_iter: usize,
}

impl InversionTrace {
    pub fn total_iterations(&self) -> usize {
        self.blocks.iter().map(|b| b.iterations).sum()
    }
}

fn block_delta(net: &CoordinateNetwork) -> Result<f64> {
    let cert = net.certificate();
    if !cert.is_finite() {
        return Err(Error::Refused("block has no Lipschitz certificate".into()));
    }
    if cert.bound >= 1.0 {
        return Err(Error::Refused(format!("block certifies Lip <= {} >= 1", cert.bound)));
    }
    Ok(cert.bound)
}

/// A priori iteration count for residual `tol` from first step `step0`.
pub fn a_priori_bound(tol: f64, delta: f64, step0: f64) -> usize {
    if step0 <= tol || delta == 0.0 {
        return 1;
    }
    ((tol * (1.0 - delta) / step0).ln() / delta.ln()).ceil().max(0.0) as usize + 1
}

/// Solves `x + D_N NN(E_N x) = y` by `x <- y - D_N NN(E_N x)`.
pub fn block_fixed_point(
    net: &CoordinateNetwork,
    y: &SpectralVector,
    cfg: &InversionConfig,
) -> Result<(SpectralVector, BlockTrace)> {
    let delta = block_delta(net)?;
    let n = net.input_dim();
    if n > y.dim() {
        return Err(Error::DimensionMismatch { expected: n, got: y.dim() });
    }
    let cert_radius = net.certificate().radius;
    let head_y = &y.coeffs()[..n];
    // Only the head moves; the tail of the solution equals the tail of y.
    let mut x: Vec<f64> = match cfg.start {
        StartPoint::Target => head_y.to_vec(),
        StartPoint::Zero => vec![0.0; n],
    };
    let mut residuals = Vec::new();
    let mut bound = None;
    for it in 0..=cfg.max_iter {
        if let Some(r) = cert_radius {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > r {
                return Err(Error::Domain(format!("iterate left the certified ball of radius {r}")));
            }
        }
        let nn = net.eval(&x);
        let next: Vec<f64> = head_y.iter().zip(&nn).map(|(a, b)| a - b).collect();
        let step = x.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        residuals.push(step);
        let bound = *bound.get_or_insert_with(|| a_priori_bound(cfg.tol, delta, step));
        if step <= cfg.tol {
            let mut out = y.clone();
            out.coeffs_mut()[..n].copy_from_slice(&x);
            if let Some(r) = cfg.domain_radius {
                if out.norm() > r {
                    return Err(Error::Domain(format!("solution leaves the ball of radius {r}")));
                }
            }
            return Ok((
                out,
                BlockTrace {
                    delta,
                    iterations: it,
                    final_residual: step,
                    residuals,
                    a_priori_bound: bound,
                },
            ));
        }
        x = next;
        if let Some(r) = cfg.domain_radius {
            let tail: f64 = y.coeffs()[n..].iter().map(|v| v * v).sum();
            if (x.iter().map(|v| v * v).sum::<f64>() + tail).sqrt() > r {
                return Err(Error::Domain(format!("iterate leaves the ball of radius {r}")));
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// `(G o A)^{-1}(y)`: blocks inverted last to first, then `A^{-1}`.
pub fn chain_inverse(
    chain: &ResidualChain,
    a: &LinearOperatorExpr,
    y: &SpectralVector,
    cfg: &InversionConfig,
) -> Result<(SpectralVector, InversionTrace)> {
    check_dim(chain.ambient_dim, y.dim())?;
    if !matches!(a, LinearOperatorExpr::Identity | LinearOperatorExpr::Reflection { .. }) {
        return Err(Error::invalid("A must be the identity or a reflection"));
    }
    let mut z = y.clone();
    let mut traces = Vec::with_capacity(chain.blocks.len());
    for (k, net) in chain.blocks.iter().enumerate().rev() {
        let (x, trace) = block_fixed_point(net, &z, cfg).map_err(|e| match e {
            Error::Refused(msg) => Error::Refused(format!("block {k}: {msg}")),
            other => other,
        })?;
        z = x;
        traces.push(trace);
    }
    let x = a.solve(&z)?;
    Ok((
        x,
        InversionTrace {
            blocks: traces,
            tol: cfg.tol,
            max_iter: cfg.max_iter,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalInverseReport {
    pub delta: f64,
    pub samples: usize,
    pub radius: f64,
    /// `max |F^{-1}(F(x)) - x|`.
    pub forward_roundtrip: f64,
    /// `max |F(F^{-1}(y)) - y|`.
    pub backward_roundtrip: f64,
    /// Sampled strong-monotonicity constant of each block.
    pub block_alpha: Vec<f64>,
    pub max_iterations: usize,
}

impl GlobalInverseReport {
    pub fn min_block_alpha(&self) -> f64 {
        self.block_alpha.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn global_inverse_check(
    chain: &InvertibleResidualChain,
    r: f64,
    n: usize,
    seed: u64,
    cfg: &InversionConfig,
) -> Result<GlobalInverseReport> {
    if !chain.is_globally_certified() {
        return Err(Error::Refused("chain has only ball-local certificates".into()));
    }
    if n < 2 || r <= 0.0 {
        return Err(Error::invalid("global_inverse_check needs n >= 2 and r > 0"));
    }
    let g = &chain.chain;
    let id = LinearOperatorExpr::Identity;
    let samples = sample_ball(g.ambient_dim, r, n, SAMPLE_DECAY, seed);
    let rows = samples
        .par_iter()
        .map(|x| {
            let (back, t1) = chain_inverse(g, &id, &g.apply(x), cfg)?;
            let (pre, t2) = chain_inverse(g, &id, x, cfg)?;
            let iters = t1
                .blocks
                .iter()
                .chain(&t2.blocks)
                .map(|b| b.iterations)
                .max()
                .unwrap_or(0);
            Ok((back.distance(x), g.apply(&pre).distance(x), iters))
        })
        .collect::<Result<Vec<_>>>()?;
    let block_alpha = g
        .blocks
        .iter()
        .map(|net| {
            let block = BlockMap {
                ambient_dim: g.ambient_dim,
                net,
            };
            pairwise_alpha_on(&block, &samples, r, seed).map(|c| c.alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlobalInverseReport {
        delta: chain.delta,
        samples: n,
        radius: r,
        forward_roundtrip: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        backward_roundtrip: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        block_alpha,
        max_iterations: rows.iter().map(|r| r.2).max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::CoordinateActivation;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_returns_target() {
        let y = &sample_ball(6, 1.0, 1, 0.0, 1)[0];
        let (x, trace) = block_fixed_point(&CoordinateNetwork::zero(3), y, &InversionConfig::default()).unwrap();
        assert_eq!(&x, y);
        assert_eq!(trace.iterations, 0);
    }

    #[test]
    fn scalar_closed_form() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = 0.5;
        let net = CoordinateNetwork::linear(m).unwrap();
        let y = SpectralVector::new(vec![0.9, -0.4, 0.3]);
        let cfg = InversionConfig::default();
        let (x, _) = block_fixed_point(&net, &y, &cfg).unwrap();
        assert!((x.coeffs()[0] - 0.9 / 1.5).abs() <= cfg.tol);
        assert_eq!(&x.coeffs()[1..], &y.coeffs()[1..]);
    }

    #[test]
    fn half_contraction_iteration_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = CoordinateNetwork::random(&mut rng, 4, &[8, 8], CoordinateActivation::Groupsort2, 0.5, 0.1, None).unwrap();
        let y = sample_ball(8, 1.0, 1, 0.0, 3)[0].clone();
        let y = y.scale(1.0 / y.norm());
        let cfg = InversionConfig {
            tol: 1e-10,
            ..InversionConfig::default()
        };
        let (x, trace) = block_fixed_point(&net, &y, &cfg).unwrap();
        assert!(trace.iterations <= 40);
        assert!(trace.iterations <= trace.a_priori_bound);
        assert!(trace.decreasing_after_first());
        assert!(trace.median_contraction().unwrap() <= 0.55);
        let block = BlockMap { ambient_dim: 8, net: &net };
        assert!(block.apply(&x).distance(&y) <= 1e-10);
        let (x0, _) = block_fixed_point(&net, &y, &InversionConfig { start: StartPoint::Zero, ..cfg.clone() }).unwrap();
        assert!(x0.distance(&x) <= 2.0 * cfg.tol);
    }

    #[test]
    fn chain_inverse_examples() {
        let y = sample_ball(6, 1.0, 1, 0.0, 4)[0].clone();
        let empty = ResidualChain::new(6, 3, vec![]).unwrap();
        let cfg = InversionConfig::default();
        assert_eq!(chain_inverse(&empty, &LinearOperatorExpr::Identity, &y, &cfg).unwrap().0, y);
        let refl = LinearOperatorExpr::reflection_e1(6);
        assert_eq!(chain_inverse(&empty, &refl, &y, &cfg).unwrap().0, refl.apply(&y).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let big = ResidualChain::random(&mut rng, 6, 3, 1, &[6], CoordinateActivation::Groupsort2, 1.2, None).unwrap();
        assert!(matches!(chain_inverse(&big, &refl, &y, &cfg), Err(Error::Refused(_))));
        assert!(chain_inverse(&empty, &LinearOperatorExpr::Scalar { c: 2.0 }, &y, &cfg).is_err());
    }

    #[test]
    fn recu_chains_need_global_certificates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chain = ResidualChain::random(&mut rng, 6, 3, 1, &[6], CoordinateActivation::Recu, 0.5, Some(1.0)).unwrap();
        let inv = InvertibleResidualChain::new(chain, 0.6).unwrap();
        assert!(matches!(
            global_inverse_check(&inv, 1.0, 4, 1, &InversionConfig::default()),
            Err(Error::Refused(_))
        ));
        let identity = InvertibleResidualChain::new(ResidualChain::new(6, 3, vec![]).unwrap(), 0.5).unwrap();
        let report = global_inverse_check(&identity, 1.0, 8, 1, &InversionConfig::default()).unwrap();
        assert_eq!(report.forward_roundtrip, 0.0);
    }
}
