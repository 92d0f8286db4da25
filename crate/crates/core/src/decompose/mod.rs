//! Factoring a bilipschitz layer on a ball into `A0` (identity or reflection)
//! followed by strongly monotone near-identity blocks `H_k = Id + B_k`.
//!
//! Pipeline: choose a finite subspace `W` carrying the large singular
//! directions, replace `F` by `F^W = Id + P_W T2 G T1 P_W`, peel off the
//! remainder `F o (F^W)^{-1}`, then connect `Df(0)` to `f = F^W|_W` by the
//! homotopy `f_t` and `Df(0)` to `A0` by a polar/rotation path.

mod inverse;
mod linear;
mod path;

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use inverse::{invert_chord, invert_monotone, invert_newton, monotone_steps_bound, Inverse};
pub use linear::{linear_path_blocks, LinearPath, RepeatedFactor, MAX_CONDITION};
pub use path::{
    apply_path, block_constants, c2_estimate, jacobian_at_zero, path_blocks, sample_pairs, BlockConstants, Homotopy,
    PathBlocks, PathSettings, INVERSE_TOL,
};

use crate::error::{Error, Result};
use crate::layers::{LayerDoc, NeuralOperatorLayer};
use crate::linalg::{self, min_sym_eig, spectral_norm};
use crate::map::{prefix_jacobian, FnMap, Map};
use crate::monotone::{bilipschitz_on, SAMPLE_DECAY};
use crate::operators::{operator_norm_estimate, FiniteRankOperator, LinearOperatorExpr};
use crate::spectral_core::{sample_ball, SpectralVector};

/// Vectors whose Gram-Schmidt remainder falls below this are dropped from `W`.
const DEPENDENCE_TOL: f64 = 1e-10;

/// An orthonormal frame `Q` (ambient by `k`) whose first column is `e_1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceFrame {
    basis: DMatrix<f64>,
}

impl SubspaceFrame {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let k = basis.ncols();
        if k == 0 || k > basis.nrows() {
            return Err(Error::invalid("frame needs between 1 and ambient-dimension columns"));
        }
        let gram_err = (basis.transpose() * &basis - DMatrix::identity(k, k)).abs().max();
        if gram_err > 1e-10 {
            return Err(Error::invalid(format!("frame columns are not orthonormal ({gram_err:e})")));
        }
        if (basis[(0, 0)] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("frame must start with e_1"));
        }
        Ok(SubspaceFrame { basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `Q^T x`.
    pub fn coords(&self, x: &SpectralVector) -> SpectralVector {
        SpectralVector::from_dvector(&(self.basis.transpose() * x.to_dvector()))
    }

    /// `Q w`.
    pub fn embed(&self, w: &SpectralVector) -> SpectralVector {
        SpectralVector::from_dvector(&(&self.basis * w.to_dvector()))
    }

    /// `x - P_W x + Q w`: replaces the `W` component of `x` by `w`.
    pub fn replace(&self, x: &SpectralVector, w: &SpectralVector) -> SpectralVector {
        let mut out = x - &self.embed(&self.coords(x));
        out.axpy(1.0, &self.embed(w));
        out
    }

    pub fn project(&self, x: &SpectralVector) -> SpectralVector {
        self.embed(&self.coords(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailNorms {
    /// `|T1 (Id - P_W)|`.
    pub t1_right: f64,
    /// `|(Id - P_W) T1|`.
    pub t1_left: f64,
    pub t2_right: f64,
    pub t2_left: f64,
}

impl TailNorms {
    pub fn max(&self) -> f64 {
        self.t1_right.max(self.t1_left).max(self.t2_right).max(self.t2_left)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub h: f64,
    pub w_dim: usize,
    pub kept_t1: usize,
    pub kept_t2: usize,
    pub tails: TailNorms,
    /// Whether every singular triple was kept, so `F^W = F`.
    pub exact: bool,
}

/// `h = epsilon / (4 (1 + Lip G)(1 + |T1|)(1 + |T2|))`.
pub fn default_h(layer: &NeuralOperatorLayer, epsilon: f64) -> f64 {
    let lip = layer.g_lipschitz().bound;
    epsilon / (4.0 * (1.0 + lip) * (1.0 + layer.t1.norm()) * (1.0 + layer.t2.norm()))
}

fn kept(t: &FiniteRankOperator, h: f64) -> usize {
    t.omegas().iter().take_while(|w| **w >= h).count()
}

/// `W = span{e_1, psi_p, phi_p : omega_p >= h}` over both operators, with verified tails.
pub fn choose_w(layer: &NeuralOperatorLayer, h: f64) -> Result<(SubspaceFrame, TailReport)> {
    if !(h > 0.0) {
        return Err(Error::invalid("h must be positive"));
    }
    let m = layer.dim();
    let (k1, k2) = (kept(&layer.t1, h), kept(&layer.t2, h));
    let mut candidates = vec![SpectralVector::unit(m, 0)];
    for (t, k) in [(&layer.t1, k1), (&layer.t2, k2)] {
        candidates.extend(t.inputs()[..k].iter().cloned());
        candidates.extend(t.outputs()[..k].iter().cloned());
    }
    let mut columns: Vec<SpectralVector> = Vec::new();
    for c in candidates {
        let mut v = c;
        for _ in 0..2 {
            for q in &columns {
                let proj = v.dot(q);
                v.axpy(-proj, q);
            }
        }
        let n = v.norm();
        if n > DEPENDENCE_TOL {
            columns.push(v.scale(1.0 / n));
        }
    }
    let basis = DMatrix::from_fn(m, columns.len(), |i, j| columns[j].coeffs()[i]);
    let frame = SubspaceFrame::new(basis)?;
    let tail = |t: &FiniteRankOperator, left: bool, seed: u64| -> Result<f64> {
        let op = FnMap::new(m, |x: &SpectralVector| {
            if left {
                let y = Map::apply(t, x);
                &y - &frame.project(&y)
            } else {
                Map::apply(t, &(x - &frame.project(x)))
            }
        });
        operator_norm_estimate(&op, 20, seed)
    };
    let tails = TailNorms {
        t1_right: tail(&layer.t1, false, 1)?,
        t1_left: tail(&layer.t1, true, 2)?,
        t2_right: tail(&layer.t2, false, 3)?,
        t2_left: tail(&layer.t2, true, 4)?,
    };
    if tails.max() >= h {
        return Err(Error::Numerical(format!(
            "tail norm {:e} is not below h = {h:e}",
            tails.max()
        )));
    }
    let exact = k1 == layer.t1.rank() && k2 == layer.t2.rank();
    let report = TailReport {
        h,
        w_dim: frame.dim(),
        kept_t1: k1,
        kept_t2: k2,
        tails,
        exact,
    };
    Ok((frame, report))
}

/// `F^W = Id + P_W T2 G T1 P_W` on the ambient space.
pub struct TruncatedLayer {
    layer: Arc<NeuralOperatorLayer>,
    frame: Arc<SubspaceFrame>,
}

impl Map for TruncatedLayer {
    fn dim(&self) -> usize {
        self.layer.dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        let mut y = x.clone();
        y.axpy(1.0, &self.frame.project(&self.layer.residual(&self.frame.project(x))));
        y
    }
}

pub fn build_fw(layer: Arc<NeuralOperatorLayer>, frame: Arc<SubspaceFrame>) -> TruncatedLayer {
    TruncatedLayer { layer, frame }
}

/// `f = F^W|_W` in frame coordinates.
pub struct RestrictedLayer {
    layer: Arc<NeuralOperatorLayer>,
    frame: Arc<SubspaceFrame>,
}

impl Map for RestrictedLayer {
    fn dim(&self) -> usize {
        self.frame.dim()
    }
    fn apply(&self, w: &SpectralVector) -> SpectralVector {
        let mut out = w.clone();
        out.axpy(1.0, &self.frame.coords(&self.layer.residual(&self.frame.embed(w))));
        out
    }
}

/// Shared state for evaluating the factors of a decomposition.
struct Factors {
    layer: Arc<NeuralOperatorLayer>,
    frame: Arc<SubspaceFrame>,
    homotopy: Homotopy,
}

impl Factors {
    fn new(layer: Arc<NeuralOperatorLayer>, frame: Arc<SubspaceFrame>, df0: Option<DMatrix<f64>>) -> Result<Self> {
        let f: Arc<dyn Map> = Arc::new(RestrictedLayer {
            layer: layer.clone(),
            frame: frame.clone(),
        });
        let homotopy = match df0 {
            Some(j) => Homotopy::with_jacobian(f, j)?,
            None => Homotopy::new(f)?,
        };
        Ok(Factors { layer, frame, homotopy })
    }

    /// `(F^W)^{-1}(z)`.
    fn fw_inverse(&self, z: &SpectralVector) -> Result<SpectralVector> {
        let w = self.homotopy.inverse(1.0, &self.frame.coords(z))?;
        Ok(self.frame.replace(z, &w))
    }

    /// `(Id + B~)(z) = F((F^W)^{-1}(z))`.
    fn peel(&self, z: &SpectralVector) -> Result<SpectralVector> {
        Ok(self.layer.apply(&self.fw_inverse(z)?))
    }

    fn path(&self, a: f64, b: f64, cutoff: f64, z: &SpectralVector) -> Result<SpectralVector> {
        let w = self.homotopy.block(a, b, cutoff, &self.frame.coords(z))?;
        Ok(self.frame.replace(z, &w))
    }

    fn linear(&self, m: &DMatrix<f64>, z: &SpectralVector) -> SpectralVector {
        let w = SpectralVector::from_dvector(&(m * self.frame.coords(z).to_dvector()));
        self.frame.replace(z, &w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeelReport {
    /// `B~ = 0` because `F^W = F`.
    pub trivial: bool,
    pub lipschitz: f64,
    pub alpha: f64,
    /// `max |(Id + B~)(F^W(x)) - F(x)|` over samples.
    pub roundtrip: f64,
}

/// `B~ = F o (F^W)^{-1} - Id` with sampled constants on `B(0, radius)`.
fn peel_tail(factors: &Factors, exact: bool, radius: f64, pairs: usize, seed: u64) -> Result<PeelReport> {
    if exact {
        return Ok(PeelReport {
            trivial: true,
            lipschitz: 0.0,
            alpha: 1.0,
            roundtrip: 0.0,
        });
    }
    let m = factors.layer.dim();
    let sampled = sample_pairs(m, radius, pairs, seed);
    let c = block_constants(|z| factors.peel(z), &sampled)?;
    let fw = build_fw(factors.layer.clone(), factors.frame.clone());
    let roundtrip = sample_ball(m, radius, pairs, SAMPLE_DECAY, seed ^ 0xbeef)
        .par_iter()
        .map(|x| Ok(factors.peel(&fw.apply(x))?.distance(&factors.layer.apply(x))))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(PeelReport {
        trivial: false,
        lipschitz: c.lipschitz,
        alpha: c.alpha,
        roundtrip,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub epsilon: f64,
    pub r1: f64,
    /// Singular-value cut; defaults to [`default_h`].
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_composite_samples")]
    pub composite_samples: usize,
    #[serde(default = "default_composite_tol")]
    pub composite_tol: f64,
    #[serde(default = "default_max_blocks")]
    pub max_blocks: usize,
    pub seed: u64,
}

fn default_pairs() -> usize {
    100
}
fn default_composite_samples() -> usize {
    200
}
fn default_composite_tol() -> f64 {
    1e-6
}
fn default_max_blocks() -> usize {
    20_000
}

impl DecomposeConfig {
    pub fn new(epsilon: f64, r1: f64, seed: u64) -> Self {
        DecomposeConfig {
            epsilon,
            r1,
            h: None,
            pairs: default_pairs(),
            composite_samples: default_composite_samples(),
            composite_tol: default_composite_tol(),
            max_blocks: default_max_blocks(),
            seed,
        }
    }
}

/// Everything needed to rebuild the composite evaluator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionPlan {
    pub layer: LayerDoc,
    #[serde(with = "linalg::rows")]
    pub frame: DMatrix<f64>,
    #[serde(with = "linalg::rows")]
    pub df0: DMatrix<f64>,
    pub linear: LinearPath,
    pub t_grid: Vec<f64>,
    pub cutoff: f64,
    pub peel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    Rotation,
    Stretch,
    Path { t_from: f64, t_to: f64 },
    Peel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub index: usize,
    #[serde(flatten)]
    pub kind: BlockKind,
    /// `Lip(H_k - Id)`: exact for linear blocks, sampled otherwise.
    pub lipschitz: f64,
    /// Strong-monotonicity constant: exact for linear blocks, sampled otherwise.
    pub alpha: f64,
    pub det_at_zero: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub tail: TailReport,
    pub c0: f64,
    pub c1: f64,
    /// Finite-difference estimate of `|f|_{C^2}`, not a bound.
    pub c2_estimate: f64,
    pub cutoff: f64,
    pub t_grid: Vec<f64>,
    pub refinements: usize,
    /// Rotation then stretch parameters of the linear path.
    pub s_grid: Vec<f64>,
    pub rotation_step_norm: f64,
    pub stretch_step_norm: f64,
    pub linear_product_error: f64,
    /// Sampled `sup |F - F^W|` on `B(0, r1)` and the bound `(1 + r1) epsilon / 2`.
    pub fw_deviation: f64,
    pub fw_deviation_bound: f64,
    pub peel: PeelReport,
    pub composite_error: f64,
    pub composite_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub a0: LinearOperatorExpr,
    pub j: usize,
    pub r1: f64,
    pub epsilon: f64,
    pub blocks: Vec<BlockReport>,
    pub diagnostics: Diagnostics,
    pub plan: DecompositionPlan,
}

impl DecompositionResult {
    pub fn max_block_lipschitz(&self) -> f64 {
        self.blocks.iter().map(|b| b.lipschitz).fold(0.0, f64::max)
    }

    pub fn min_block_alpha(&self) -> f64 {
        self.blocks.iter().map(|b| b.alpha).fold(f64::INFINITY, f64::min)
    }

    pub fn evaluator(&self) -> Result<Decomposition> {
        Decomposition::from_plan(&self.plan)
    }
}

enum Block {
    Linear(DMatrix<f64>),
    Path(f64, f64),
    Peel,
}

/// The composite `H_J o ... o H_1 o A0` rebuilt from a plan.
pub struct Decomposition {
    factors: Factors,
    a0: LinearOperatorExpr,
    blocks: Vec<Block>,
    cutoff: f64,
}

impl Decomposition {
    pub fn from_plan(plan: &DecompositionPlan) -> Result<Self> {
        let layer = Arc::new(NeuralOperatorLayer::from_doc(plan.layer.clone())?);
        let frame = Arc::new(SubspaceFrame::new(plan.frame.clone())?);
        if frame.ambient_dim() != layer.dim() {
            return Err(Error::DimensionMismatch {
                expected: layer.dim(),
                got: frame.ambient_dim(),
            });
        }
        let m = layer.dim();
        let factors = Factors::new(layer, frame, Some(plan.df0.clone()))?;
        let mut blocks: Vec<Block> = plan.linear.factors().map(|f| Block::Linear(f.clone())).collect();
        blocks.extend(plan.t_grid.windows(2).map(|w| Block::Path(w[0], w[1])));
        if plan.peel {
            blocks.push(Block::Peel);
        }
        let a0 = if plan.linear.reflect {
            LinearOperatorExpr::reflection_e1(m)
        } else {
            LinearOperatorExpr::Identity
        };
        Ok(Decomposition {
            factors,
            a0,
            blocks,
            cutoff: plan.cutoff,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn a0(&self) -> &LinearOperatorExpr {
        &self.a0
    }

    /// `H_k(z)` for `k` counted from zero.
    pub fn apply_block(&self, k: usize, z: &SpectralVector) -> Result<SpectralVector> {
        match &self.blocks[k] {
            Block::Linear(m) => Ok(self.factors.linear(m, z)),
            Block::Path(a, b) => self.factors.path(*a, *b, self.cutoff, z),
            Block::Peel => self.factors.peel(z),
        }
    }

    pub fn eval(&self, x: &SpectralVector) -> Result<SpectralVector> {
        let start = self.a0.apply(x)?;
        (0..self.blocks.len()).try_fold(start, |z, k| self.apply_block(k, &z))
    }
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Least-squares slope of `log J` against `log(1/epsilon)`.
pub fn scaling_slope(epsilons: &[f64], counts: &[usize]) -> Result<f64> {
    if epsilons.len() != counts.len() || epsilons.len() < 2 || counts.contains(&0) {
        return Err(Error::invalid("slope fit needs at least two positive block counts"));
    }
    let xs: Vec<f64> = epsilons.iter().map(|e| (1.0 / e).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|j| (*j as f64).ln()).collect();
    Ok(ls_slope(&xs, &ys))
}

fn linear_reports(path: &LinearPath, start: usize) -> Vec<BlockReport> {
    let k = path.rotation.matrix.nrows();
    let id = DMatrix::identity(k, k);
    let report = |kind: BlockKind, m: &DMatrix<f64>, index: usize| BlockReport {
        index,
        kind,
        lipschitz: spectral_norm(&(m - &id)),
        alpha: min_sym_eig(m),
        det_at_zero: m.determinant(),
    };
    let rot = (0..path.rotation.repeat).map(|i| report(BlockKind::Rotation, &path.rotation.matrix, start + i));
    let str_start = start + path.rotation.repeat;
    let stretch = (0..path.stretch.repeat).map(|i| report(BlockKind::Stretch, &path.stretch.matrix, str_start + i));
    rot.chain(stretch).collect()
}

/// Runs the full pipeline on `B(0, r1)`.
pub fn decompose(layer: &NeuralOperatorLayer, cfg: &DecomposeConfig) -> Result<DecompositionResult> {
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps < 1.0) || cfg.r1 <= 0.0 {
        return Err(Error::invalid("decompose needs 0 < epsilon < 1 and r1 > 0"));
    }
    if cfg.pairs < 2 || cfg.composite_samples == 0 {
        return Err(Error::invalid("decompose needs at least two verification pairs and one composite sample"));
    }
    let m = layer.dim();
    let (lo, _) = bilipschitz_on(layer, &sample_ball(m, cfg.r1, 64, SAMPLE_DECAY, cfg.seed)).map_err(|e| e.at("bilipschitz"))?;
    if lo <= 0.0 {
        return Err(Error::Infeasible("layer is not bilipschitz on the sampled ball".into()).at("bilipschitz"));
    }
    let layer = Arc::new(layer.clone());
    let h = cfg.h.unwrap_or_else(|| default_h(&layer, eps));
    let (frame, tail) = choose_w(&layer, h).map_err(|e| e.at("choose_w"))?;
    let frame = Arc::new(frame);
    let k = frame.dim();

    let fw = build_fw(layer.clone(), frame.clone());
    let fw_deviation = sample_ball(m, cfg.r1, cfg.composite_samples, SAMPLE_DECAY, cfg.seed ^ 0xf00d)
        .par_iter()
        .map(|x| fw.apply(x).distance(&layer.apply(x)))
        .reduce(|| 0.0, f64::max);

    let factors = Factors::new(layer.clone(), frame.clone(), None).map_err(|e| e.at("build_fw"))?;
    let f = RestrictedLayer {
        layer: layer.clone(),
        frame: frame.clone(),
    };
    let df0 = factors.homotopy.df0().clone();
    let sv = df0.singular_values();
    let w_samples = sample_ball(k, 2.0 * cfg.r1, 64, 0.0, cfg.seed ^ 0xabc);
    let (w_lo, w_hi) = if k > 1 { bilipschitz_on(&f, &w_samples).map_err(|e| e.at("restrict"))? } else { (sv.min(), sv.max()) };
    let c0 = w_lo.min(sv.min());
    let c1 = w_hi.max(sv.max());
    let c2 = c2_estimate(&f, 2.0 * (c1 * cfg.r1 + factors.homotopy.offset().norm()) * 1.1, 32, cfg.seed);

    let radius_out = c1 * cfg.r1 + factors.homotopy.offset().norm();
    let peel = peel_tail(&factors, tail.exact, 1.1 * radius_out, cfg.pairs, cfg.seed ^ 0x9ee1).map_err(|e| e.at("peel_tail"))?;

    let path = path_blocks(
        &factors.homotopy,
        &PathSettings {
            epsilon: eps,
            r1: cfg.r1,
            c0,
            c1,
            c2,
            pairs: cfg.pairs,
            max_blocks: cfg.max_blocks,
            seed: cfg.seed,
        },
    )
    .map_err(|e| e.at("path_blocks"))?;
    let linear = linear_path_blocks(&df0, eps).map_err(|e| e.at("linear_path_blocks"))?;

    let plan = DecompositionPlan {
        layer: layer.to_doc(),
        frame: frame.basis().clone(),
        df0,
        linear: linear.clone(),
        t_grid: if path.constants.is_empty() { vec![] } else { path.t_grid.clone() },
        cutoff: path.cutoff,
        peel: !peel.trivial,
    };
    let composite = Decomposition::from_plan(&plan).map_err(|e| e.at("assemble"))?;

    let mut blocks = linear_reports(&linear, 0);
    let zero_w = SpectralVector::zeros(k);
    let path_start = blocks.len();
    let path_dets: Vec<f64> = path
        .t_grid
        .par_windows(2)
        .take(path.constants.len())
        .map(|w| {
            let block = FnMap::new(k, |x: &SpectralVector| {
                factors.homotopy.block(w[0], w[1], path.cutoff, x).expect("inversion converged during verification")
            });
            prefix_jacobian(&block, &zero_w, k, 1e-5).determinant()
        })
        .collect();
    for (i, (c, w)) in path.constants.iter().zip(path.t_grid.windows(2)).enumerate() {
        blocks.push(BlockReport {
            index: path_start + i,
            kind: BlockKind::Path { t_from: w[0], t_to: w[1] },
            lipschitz: c.lipschitz,
            alpha: c.alpha,
            det_at_zero: path_dets[i],
        });
    }
    if !peel.trivial {
        let peel_map = FnMap::new(m, |z: &SpectralVector| factors.peel(z).expect("inversion converged during verification"));
        blocks.push(BlockReport {
            index: blocks.len(),
            kind: BlockKind::Peel,
            lipschitz: peel.lipschitz,
            alpha: peel.alpha,
            det_at_zero: prefix_jacobian(&peel_map, &SpectralVector::zeros(m), m, 1e-5).determinant(),
        });
    }

    let composite_error = sample_ball(m, cfg.r1, cfg.composite_samples, SAMPLE_DECAY, cfg.seed ^ 0xc0de)
        .par_iter()
        .map(|x| Ok(composite.eval(x)?.distance(&layer.apply(x))))
        .collect::<Result<Vec<f64>>>()
        .map_err(|e| e.at("composite"))?
        .into_iter()
        .fold(0.0, f64::max);

    let s_grid: Vec<f64> = (1..=linear.rotation.repeat)
        .map(|i| i as f64 / linear.rotation.repeat as f64)
        .chain((1..=linear.stretch.repeat).map(|i| i as f64 / linear.stretch.repeat as f64))
        .collect();
    Ok(DecompositionResult {
        a0: composite.a0().clone(),
        j: composite.block_count(),
        r1: cfg.r1,
        epsilon: eps,
        blocks,
        diagnostics: Diagnostics {
            tail,
            c0,
            c1,
            c2_estimate: c2,
            cutoff: path.cutoff,
            t_grid: plan.t_grid.clone(),
            refinements: path.refinements,
            s_grid,
            rotation_step_norm: linear.rotation.step_norm,
            stretch_step_norm: linear.stretch.step_norm,
            linear_product_error: linear.product_error,
            fw_deviation,
            fw_deviation_bound: 0.5 * (1.0 + cfg.r1) * eps,
            peel,
            composite_error,
            composite_samples: cfg.composite_samples,
        },
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{make_layer, CoordinateNetwork, Frame, GKind, LayerSpec, Nonlinearity, SkipLinear};
    use crate::operators::PointwiseActivation;
    use crate::spectral_core::Space;

    fn space(m: usize) -> Arc<Space> {
        Arc::new(Space::fourier(m))
    }

    fn tanh_layer(m: usize, rank: usize, lip: f64, seed: u64) -> NeuralOperatorLayer {
        make_layer(
            space(m),
            seed,
            &LayerSpec {
                rank,
                decay: 3.0,
                lip_g: lip,
                g: GKind::Nemytskii {
                    activation: PointwiseActivation::Custom(crate::operators::CustomActivation::with_bounds(
                        crate::operators::CustomFunction::Tanh,
                    )),
                },
                support: Some(12),
                frame: Frame::Random,
            },
        )
        .unwrap()
    }

    #[test]
    fn choose_w_examples() {
        let m = 16;
        let t = FiniteRankOperator::aligned(m, vec![1.0], 3, 3).unwrap();
        let layer = NeuralOperatorLayer::new(space(m), t.clone(), t, Nonlinearity::zero()).unwrap();
        let (frame, report) = choose_w(&layer, 0.1).unwrap();
        assert_eq!(frame.dim(), 2);
        assert!(report.exact && report.tails.max() == 0.0);

        let omegas: Vec<f64> = (1..=14).map(|p| (p as f64).powi(-2)).collect();
        let t = FiniteRankOperator::aligned(m, omegas, 1, 1).unwrap();
        let layer = NeuralOperatorLayer::new(space(m), t.clone(), t, Nonlinearity::zero()).unwrap();
        let (frame, report) = choose_w(&layer, 0.01).unwrap();
        assert_eq!(report.kept_t1, 10);
        assert_eq!(frame.dim(), 11);
        assert!(report.tails.max() < 0.01 && !report.exact);
        assert!((report.tails.t1_right - 1.0 / 121.0).abs() < 1e-10);
    }

    #[test]
    fn fw_fixes_complement_and_matches_when_exact() {
        let layer = Arc::new(tanh_layer(16, 4, 0.25, 3));
        let (frame, report) = choose_w(&layer, 1e-3).unwrap();
        assert!(report.exact);
        let frame = Arc::new(frame);
        let fw = build_fw(layer.clone(), frame.clone());
        for x in sample_ball(16, 1.0, 10, 1.0, 4) {
            assert!(fw.apply(&x).distance(&layer.apply(&x)) < 1e-14);
            let perp = &x - &frame.project(&x);
            assert!(fw.apply(&perp).distance(&perp) < 1e-14);
        }
    }

    #[test]
    fn identity_layer_needs_no_blocks() {
        let layer = NeuralOperatorLayer::identity(space(8));
        let result = decompose(&layer, &DecomposeConfig::new(0.25, 1.0, 1)).unwrap();
        assert_eq!(result.a0, LinearOperatorExpr::Identity);
        assert_eq!(result.j, 0);
        assert!(result.diagnostics.composite_error < 1e-14);
    }

    #[test]
    fn generic_layer_decomposes() {
        let layer = tanh_layer(16, 4, 0.25, 5);
        let mut cfg = DecomposeConfig::new(0.3, 1.0, 2);
        cfg.pairs = 40;
        cfg.composite_samples = 40;
        cfg.h = Some(0.03);
        let result = decompose(&layer, &cfg).unwrap();
        assert!(!result.diagnostics.peel.trivial);
        assert!(result.diagnostics.peel.roundtrip < 1e-8);
        assert!(result.diagnostics.fw_deviation <= result.diagnostics.fw_deviation_bound);
        assert!(result.max_block_lipschitz() < 0.3);
        assert!(result.min_block_alpha() >= 0.7 - 1e-6);
        assert!(result.blocks.iter().all(|b| b.det_at_zero > 0.0));
        assert!(result.diagnostics.composite_error < 1e-6);
        let json = serde_json::to_string(&result.plan).unwrap();
        let plan: DecompositionPlan = serde_json::from_str(&json).unwrap();
        let replay = Decomposition::from_plan(&plan).unwrap();
        let x = &sample_ball(16, 1.0, 1, 1.0, 77)[0];
        assert!(replay.eval(x).unwrap().distance(&layer.apply(x)) < 1e-6);
    }

    #[test]
    fn reflected_layer_gets_reflection() {
        let m = 12;
        let n = 3;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8);
        let mut net = CoordinateNetwork::random(
            &mut rng,
            n,
            &[8],
            crate::operators::CoordinateActivation::Custom(crate::operators::CustomActivation::with_bounds(
                crate::operators::CustomFunction::Tanh,
            )),
            0.2,
            0.1,
            None,
        )
        .unwrap();
        let mut skip = DMatrix::zeros(n, n);
        skip[(0, 0)] = -2.0;
        net.skip = Some(SkipLinear { matrix: skip });
        let id = FiniteRankOperator::aligned(m, vec![1.0; n], 0, 0).unwrap();
        let layer = NeuralOperatorLayer::new(space(m), id.clone(), id, Nonlinearity::CoordinateNet { net }).unwrap();
        let mut cfg = DecomposeConfig::new(0.3, 1.0, 3);
        cfg.pairs = 30;
        cfg.composite_samples = 30;
        let result = decompose(&layer, &cfg).unwrap();
        assert_eq!(result.a0, LinearOperatorExpr::reflection_e1(m));
        assert!(result.diagnostics.composite_error < 1e-6);
    }

    #[test]
    fn slope_fit() {
        let eps = [0.4, 0.2, 0.1];
        let j = [10usize, 20, 40];
        assert!((scaling_slope(&eps, &j).unwrap() - 1.0).abs() < 1e-12);
        assert!(scaling_slope(&eps, &[1, 0, 2]).is_err());
    }
}
