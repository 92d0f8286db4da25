//! The nonlinear homotopy `f_t(x) = (f(tx) - f(0)) / t + t f(0)` from `Df(0)`
//! to `f`, and the cut-off near-identity blocks `f_b o f_a^{-1}` along it.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inverse::{invert_chord, invert_newton};
use crate::error::{Error, Result};
use crate::map::{prefix_jacobian, Map};
use crate::smooth::radial_cutoff;
use crate::spectral_core::{sample_ball, SpectralVector};

/// Relative residual for inner inversions.
pub const INVERSE_TOL: f64 = 1e-13;
const INVERSE_MAX_ITER: usize = 200;

/// `Df(0)` by Richardson-extrapolated central differences.
pub fn jacobian_at_zero(f: &dyn Map) -> DMatrix<f64> {
    let d = f.dim();
    let zero = SpectralVector::zeros(d);
    let coarse = prefix_jacobian(f, &zero, d, 1e-3);
    let fine = prefix_jacobian(f, &zero, d, 5e-4);
    (fine * 4.0 - coarse) / 3.0
}

/// The homotopy `t -> f_t` with `f_0 = Df(0)` and `f_1 = f`.
pub struct Homotopy {
    f: Arc<dyn Map>,
    f0: SpectralVector,
    df0: DMatrix<f64>,
    df0_inv: DMatrix<f64>,
}

impl Homotopy {
    pub fn new(f: Arc<dyn Map>) -> Result<Self> {
        let df0 = jacobian_at_zero(f.as_ref());
        Self::with_jacobian(f, df0)
    }

    pub fn with_jacobian(f: Arc<dyn Map>, df0: DMatrix<f64>) -> Result<Self> {
        let df0_inv = df0
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("Df(0) is singular".into()))?;
        let f0 = f.apply(&SpectralVector::zeros(f.dim()));
        Ok(Homotopy { f, f0, df0, df0_inv })
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn offset(&self) -> &SpectralVector {
        &self.f0
    }

    pub fn df0(&self) -> &DMatrix<f64> {
        &self.df0
    }

    fn linear(&self, m: &DMatrix<f64>, x: &SpectralVector) -> SpectralVector {
        SpectralVector::from_dvector(&(m * x.to_dvector()))
    }

    pub fn eval(&self, t: f64, x: &SpectralVector) -> SpectralVector {
        if t == 0.0 {
            return self.linear(&self.df0, x);
        }
        let mut out = &self.f.apply(&x.scale(t)) - &self.f0;
        out = out.scale(1.0 / t);
        out.axpy(t, &self.f0);
        out
    }

    /// `f_t^{-1}(y) = f^{-1}(t (y - t f(0)) + f(0)) / t`.
    pub fn inverse(&self, t: f64, y: &SpectralVector) -> Result<SpectralVector> {
        if t == 0.0 {
            return Ok(self.linear(&self.df0_inv, y));
        }
        let mut shifted = y.clone();
        shifted.axpy(-t, &self.f0);
        let mut target = shifted.scale(t);
        target.axpy(1.0, &self.f0);
        let guess = self.linear(&self.df0_inv, &shifted).scale(t);
        let tol = INVERSE_TOL * t * (1.0 + y.norm());
        let w = match invert_chord(self.f.as_ref(), &target, guess.clone(), &self.df0_inv, tol, INVERSE_MAX_ITER) {
            Ok(inv) => inv.x,
            Err(_) => invert_newton(self.f.as_ref(), &target, guess, tol, INVERSE_MAX_ITER)?.x,
        };
        Ok(w.scale(1.0 / t))
    }

    /// `x + phi(|x|) (f_b(f_a^{-1}(x)) - x)` with the cutoff equal to 1 up to `cutoff`.
    pub fn block(&self, a: f64, b: f64, cutoff: f64, x: &SpectralVector) -> Result<SpectralVector> {
        let weight = radial_cutoff(x.norm(), cutoff);
        if weight == 0.0 {
            return Ok(x.clone());
        }
        let moved = self.eval(b, &self.inverse(a, x)?);
        let mut out = x.clone();
        out.axpy(weight, &(&moved - x));
        Ok(out)
    }

    /// Whether `f` is linear on the sampled ball, so every `f_t` equals `f`.
    pub fn is_linear(&self, radius: f64, seed: u64) -> bool {
        if self.f0.norm() > 1e-14 {
            return false;
        }
        sample_ball(self.dim(), radius, 16, 0.0, seed)
            .iter()
            .all(|x| self.f.apply(x).distance(&self.linear(&self.df0, x)) <= 1e-12 * (1.0 + x.norm()))
    }
}

/// Largest sampled second difference `|D^2 f(x)[u, v]|` over the ball.
pub fn c2_estimate(f: &dyn Map, radius: f64, n: usize, seed: u64) -> f64 {
    let d = f.dim();
    let points = sample_ball(d, radius, n, 0.0, seed);
    let dirs = sample_ball(d, 1.0, 2 * n, 0.0, seed ^ 0x5eed);
    let h = 1e-3 * (1.0 + radius);
    points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let u = dirs[2 * i].scale(1.0 / dirs[2 * i].norm());
            let v = dirs[2 * i + 1].scale(1.0 / dirs[2 * i + 1].norm());
            let at = |a: f64, b: f64| {
                let mut p = x.clone();
                p.axpy(a * h, &u);
                p.axpy(b * h, &v);
                f.apply(&p)
            };
            let mut second = at(1.0, 1.0);
            second.axpy(-1.0, &at(1.0, -1.0));
            second.axpy(-1.0, &at(-1.0, 1.0));
            second.axpy(1.0, &at(-1.0, -1.0));
            second.norm() / (4.0 * h * h)
        })
        .reduce(|| 0.0, f64::max)
}

/// Sampled constants of a block `H = Id + B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConstants {
    /// `max |B(x) - B(y)| / |x - y|` over the pairs.
    pub lipschitz: f64,
    /// `min <H(x) - H(y), x - y> / |x - y|^2` over the pairs.
    pub alpha: f64,
    pub pairs: usize,
}

/// Half of the pairs are independent points of the ball, half are close pairs.
pub fn sample_pairs(dim: usize, radius: f64, pairs: usize, seed: u64) -> Vec<(SpectralVector, SpectralVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let far = pairs / 2;
    let points = sample_ball(dim, radius, 2 * pairs, 0.0, rng.gen());
    (0..pairs)
        .map(|i| {
            let x = points[2 * i].clone();
            if i < far {
                (x, points[2 * i + 1].clone())
            } else {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let dir = SpectralVector::new(dir);
                let mut y = x.clone();
                y.axpy(1e-3 * radius / dir.norm(), &dir);
                (x, y)
            }
        })
        .collect()
}

pub fn block_constants<F>(eval: F, pairs: &[(SpectralVector, SpectralVector)]) -> Result<BlockConstants>
where
    F: Fn(&SpectralVector) -> Result<SpectralVector> + Sync,
{
    let quotients = pairs
        .par_iter()
        .map(|(x, y)| {
            let dx = x - y;
            let d2 = dx.norm_sq();
            let (hx, hy) = (eval(x)?, eval(y)?);
            let dh = &hx - &hy;
            let db = &dh - &dx;
            Ok((db.norm() / d2.sqrt(), dh.dot(&dx) / d2))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockConstants {
        lipschitz: quotients.iter().map(|q| q.0).fold(0.0, f64::max),
        alpha: quotients.iter().map(|q| q.1).fold(f64::INFINITY, f64::min),
        pairs: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSettings {
    pub epsilon: f64,
    pub r1: f64,
    /// Lower and upper bilipschitz constants of `f`.
    pub c0: f64,
    pub c1: f64,
    /// Estimated `|f|_{C^2}`.
    pub c2: f64,
    pub pairs: usize,
    pub max_blocks: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBlocks {
    pub t_grid: Vec<f64>,
    /// Inner radius of the cutoff.
    pub cutoff: f64,
    pub constants: Vec<BlockConstants>,
    pub refinements: usize,
}

/// Grid `0 = t_0 < ... < t_m = 1`, refined until every block's sampled `Lip(B) < epsilon`.
pub fn path_blocks(h: &Homotopy, s: &PathSettings) -> Result<PathBlocks> {
    if !(s.epsilon > 0.0 && s.epsilon < 1.0) || s.r1 <= 0.0 || s.c0 <= 0.0 || s.c1 < s.c0 {
        return Err(Error::invalid("path blocks need 0 < epsilon < 1, r1 > 0 and 0 < c0 <= c1"));
    }
    if !s.c2.is_finite() {
        return Err(Error::Numerical("second-derivative estimate is not finite".into()));
    }
    let r_outer = s.c1 * s.r1 + h.offset().norm();
    let cutoff = 1.1 * r_outer;
    if h.is_linear(2.0 * cutoff, s.seed) {
        return Ok(PathBlocks {
            t_grid: vec![0.0, 1.0],
            cutoff,
            constants: vec![],
            refinements: 0,
        });
    }
    let first = 0.9 * 2.0 * s.c0 * s.epsilon / (s.c1 + s.c2 * r_outer);
    let m = (1.0 / first).ceil().max(1.0) as usize;
    if m > s.max_blocks {
        return Err(Error::Infeasible(format!("{m} path blocks exceed the cap {}", s.max_blocks)));
    }
    let support = 2.0 * cutoff;
    let check = |a: f64, b: f64, salt: u64| -> Result<BlockConstants> {
        let pairs = sample_pairs(h.dim(), 1.05 * support, s.pairs, s.seed.wrapping_add(salt));
        block_constants(|x| h.block(a, b, cutoff, x), &pairs)
    };
    let mut pending: Vec<(f64, f64)> = (0..m).map(|k| (k as f64 / m as f64, (k + 1) as f64 / m as f64)).collect();
    let mut accepted: Vec<(f64, f64, BlockConstants)> = Vec::new();
    let mut refinements = 0;
    while !pending.is_empty() {
        let results = pending
            .par_iter()
            .map(|&(a, b)| check(a, b, (a * 1e9) as u64).map(|c| (a, b, c)))
            .collect::<Result<Vec<_>>>()?;
        pending.clear();
        for (a, b, c) in results {
            if c.lipschitz < s.epsilon {
                accepted.push((a, b, c));
            } else {
                refinements += 1;
                let mid = 0.5 * (a + b);
                pending.push((a, mid));
                pending.push((mid, b));
            }
        }
        if accepted.len() + pending.len() > s.max_blocks {
            return Err(Error::Infeasible(format!("path refinement exceeded the cap of {} blocks", s.max_blocks)));
        }
    }
    accepted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut t_grid = vec![0.0];
    t_grid.extend(accepted.iter().map(|x| x.1));
    Ok(PathBlocks {
        t_grid,
        cutoff,
        constants: accepted.into_iter().map(|x| x.2).collect(),
        refinements,
    })
}

/// Applies the path blocks of `grid` in order.
pub fn apply_path(h: &Homotopy, grid: &[f64], cutoff: f64, x: &SpectralVector) -> Result<SpectralVector> {
    grid.windows(2)
        .try_fold(x.clone(), |acc, w| h.block(w[0], w[1], cutoff, &acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::FnMap;

    fn settings(epsilon: f64) -> PathSettings {
        PathSettings {
            epsilon,
            r1: 1.0,
            c0: 0.7,
            c1: 1.3,
            c2: 0.6,
            pairs: 60,
            max_blocks: 4096,
            seed: 5,
        }
    }

    fn contraction_plus_identity() -> Arc<dyn Map> {
        Arc::new(FnMap::new(3, |x: &SpectralVector| {
            let c = x.coeffs();
            SpectralVector::new(vec![
                c[0] + 0.3 * (c[1] + 0.2).sin(),
                c[1] + 0.3 * (c[2] * c[0]).tanh(),
                c[2] + 0.3 * (0.5 * c[0]).cos() * 0.5,
            ])
        }))
    }

    #[test]
    fn homotopy_endpoints_and_inverse() {
        let h = Homotopy::new(contraction_plus_identity()).unwrap();
        let x = SpectralVector::new(vec![0.4, -0.3, 0.2]);
        let f = contraction_plus_identity();
        assert!(h.eval(1.0, &x).distance(&f.apply(&x)) < 1e-14);
        for t in [0.0, 1e-3, 0.3, 1.0] {
            assert!(h.eval(t, &h.inverse(t, &x).unwrap()).distance(&x) < 1e-11);
        }
        // f_t -> Df(0) as t -> 0.
        assert!(h.eval(1e-6, &x).distance(&h.eval(0.0, &x)) < 1e-5);
    }

    #[test]
    fn linear_maps_need_no_blocks() {
        let f: Arc<dyn Map> = Arc::new(FnMap::new(2, |x: &SpectralVector| {
            let c = x.coeffs();
            SpectralVector::new(vec![2.0 * c[0] + c[1], c[1]])
        }));
        let h = Homotopy::new(f).unwrap();
        let blocks = path_blocks(&h, &settings(0.2)).unwrap();
        assert!(blocks.constants.is_empty());
    }

    #[test]
    fn composite_reproduces_map() {
        let f = contraction_plus_identity();
        let h = Homotopy::new(f.clone()).unwrap();
        let blocks = path_blocks(&h, &settings(0.25)).unwrap();
        assert!(blocks.constants.iter().all(|c| c.lipschitz < 0.25 && c.alpha >= 0.75 - 1e-6));
        for x in sample_ball(3, 1.0, 50, 0.0, 9) {
            let via = apply_path(&h, &blocks.t_grid, blocks.cutoff, &h.eval(0.0, &x)).unwrap();
            assert!(via.distance(&f.apply(&x)) < 1e-6);
        }
    }
}
