//! Neural-operator layers `x + T2 G(T1 x)`, generalized neural operators,
//! residual chains and the kernel-coefficient residual neural operator form.

mod network;
mod rno;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::map::jvp;
pub use network::{
    residual_block_apply, Affine, BlockMap, CoordinateNetwork, InvertibleResidualChain, LipschitzCertificate,
    ResidualChain, SkipLinear,
};
pub use rno::{resnet_to_rno, KernelEntry, NeuralOperatorStage, ResidualNeuralOperatorBlock};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, spectral_norm};
use crate::map::Map;
use crate::operators::{nemytskii_apply, CoordinateActivation, FiniteRankOperator, LinearOperatorExpr, PointwiseActivation};
use crate::spectral_core::{BasisSpec, Space, SpectralVector};

pub const SCHEMA_VERSION: u32 = 1;

/// The nonlinearity `G` of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    /// `G(u) = scale * sigma(u)` pointwise.
    Nemytskii {
        activation: PointwiseActivation,
        scale: f64,
    },
    /// `G(u) = D_N NN(E_N u)`, zero on the tail.
    CoordinateNet { net: CoordinateNetwork },
    /// `G(u) = D_d (A E_d u + b)`.
    AffineContraction {
        #[serde(with = "linalg::rows")]
        matrix: DMatrix<f64>,
        #[serde(with = "linalg::vector")]
        offset: DVector<f64>,
    },
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Nonlinearity::Nemytskii {
            activation: PointwiseActivation::Identity,
            scale: 0.0,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Nonlinearity::Nemytskii { .. } => Ok(()),
            Nonlinearity::CoordinateNet { net } => {
                if net.input_dim() > dim {
                    Err(Error::DimensionMismatch { expected: dim, got: net.input_dim() })
                } else {
                    Ok(())
                }
            }
            Nonlinearity::AffineContraction { matrix, offset } => {
                if matrix.nrows() != matrix.ncols() || offset.len() != matrix.nrows() {
                    Err(Error::invalid("affine nonlinearity needs a square matrix and matching offset"))
                } else if matrix.nrows() > dim {
                    Err(Error::DimensionMismatch { expected: dim, got: matrix.nrows() })
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn apply(&self, space: &Space, u: &SpectralVector) -> SpectralVector {
        match self {
            Nonlinearity::Nemytskii { activation, scale } => {
                if *scale == 0.0 {
                    return SpectralVector::zeros(u.dim());
                }
                nemytskii_apply(space, activation, u)
                    .expect("dimension checked at construction")
                    .scale(*scale)
            }
            Nonlinearity::CoordinateNet { net } => {
                let n = net.input_dim();
                let mut out = vec![0.0; u.dim()];
                out[..n].copy_from_slice(&net.eval(&u.coeffs()[..n]));
                SpectralVector::new(out)
            }
            Nonlinearity::AffineContraction { matrix, offset } => {
                let d = matrix.nrows();
                let head = matrix * DVector::from_column_slice(&u.coeffs()[..d]) + offset;
                let mut out = vec![0.0; u.dim()];
                out[..d].copy_from_slice(head.as_slice());
                SpectralVector::new(out)
            }
        }
    }

    /// Certified Lipschitz bound of `G` on the ambient space.
    pub fn lipschitz(&self) -> LipschitzCertificate {
        match self {
            Nonlinearity::Nemytskii { activation, scale } => {
                if *scale == 0.0 {
                    return LipschitzCertificate::global(0.0);
                }
                let l = activation.lipschitz().unwrap_or(f64::INFINITY);
                LipschitzCertificate::global(scale.abs() * l)
            }
            Nonlinearity::CoordinateNet { net } => net.certificate(),
            Nonlinearity::AffineContraction { matrix, .. } => LipschitzCertificate::global(spectral_norm(matrix)),
        }
    }
}

/// `F(x) = x + T2 G(T1 x)`.
#[derive(Clone, Debug)]
pub struct NeuralOperatorLayer {
    space: Arc<Space>,
    pub t1: FiniteRankOperator,
    pub t2: FiniteRankOperator,
    pub g: Nonlinearity,
    g_lip: LipschitzCertificate,
}

/// JSON form of a layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub schema: u32,
    pub space: BasisSpec,
    pub t1: FiniteRankOperator,
    pub t2: FiniteRankOperator,
    pub g: Nonlinearity,
}

impl NeuralOperatorLayer {
    pub fn new(space: Arc<Space>, t1: FiniteRankOperator, t2: FiniteRankOperator, g: Nonlinearity) -> Result<Self> {
        check_dim(space.dim(), t1.dim())?;
        check_dim(space.dim(), t2.dim())?;
        g.validate(space.dim())?;
        let g_lip = g.lipschitz();
        Ok(NeuralOperatorLayer {
            space,
            t1,
            t2,
            g,
            g_lip,
        })
    }

    pub fn identity(space: Arc<Space>) -> Self {
        let m = space.dim();
        NeuralOperatorLayer::new(space, FiniteRankOperator::zero(m), FiniteRankOperator::zero(m), Nonlinearity::zero())
            .expect("identity layer")
    }

    pub fn space(&self) -> &Arc<Space> {
        &self.space
    }

    /// Recorded Lipschitz certificate of `G`.
    pub fn g_lipschitz(&self) -> LipschitzCertificate {
        self.g_lip
    }

    /// `1 + ||T2|| Lip(G) ||T1||`.
    pub fn lipschitz_bound(&self) -> f64 {
        if self.t1.norm() == 0.0 || self.t2.norm() == 0.0 {
            return 1.0;
        }
        1.0 + self.t2.norm() * self.g_lip.bound * self.t1.norm()
    }

    pub fn eval(&self, x: &SpectralVector) -> Result<SpectralVector> {
        check_dim(self.space.dim(), x.dim())?;
        Ok(self.apply(x))
    }

    /// `T2 G(T1 x)`.
    pub fn residual(&self, x: &SpectralVector) -> SpectralVector {
        if self.t2.rank() == 0 {
            return SpectralVector::zeros(x.dim());
        }
        let u = Map::apply(&self.t1, x);
        Map::apply(&self.t2, &self.g.apply(&self.space, &u))
    }

    pub fn to_doc(&self) -> LayerDoc {
        LayerDoc {
            schema: SCHEMA_VERSION,
            space: self.space.spec().clone(),
            t1: self.t1.clone(),
            t2: self.t2.clone(),
            g: self.g.clone(),
        }
    }

    pub fn from_doc(doc: LayerDoc) -> Result<Self> {
        if doc.schema != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported layer schema {}", doc.schema)));
        }
        let space = Arc::new(Space::new(doc.space)?);
        NeuralOperatorLayer::new(space, doc.t1, doc.t2, doc.g)
    }
}

impl Map for NeuralOperatorLayer {
    fn dim(&self) -> usize {
        self.space.dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        let mut y = self.residual(x);
        y.axpy(1.0, x);
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// `psi_p = phi_p = e_p`.
    Aligned,
    /// Seeded random orthonormal families.
    #[default]
    Random,
}

/// Which `G` a generated layer uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GKind {
    Nemytskii {
        activation: PointwiseActivation,
    },
    CoordinateNet {
        n: usize,
        #[serde(default)]
        widths: Option<Vec<usize>>,
        activation: CoordinateActivation,
        #[serde(default)]
        cert_radius: Option<f64>,
    },
    AffineContraction {
        n: usize,
        #[serde(default)]
        offset_scale: f64,
    },
}

/// Parameters of a generated test layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub rank: usize,
    /// Singular values `p^-decay`, `p = 1..rank`.
    pub decay: f64,
    pub lip_g: f64,
    pub g: GKind,
    /// Random frames live on the first `support` coefficients (default: all).
    #[serde(default)]
    pub support: Option<usize>,
    #[serde(default)]
    pub frame: Frame,
}

/// Builds a seeded layer with `||T1|| = ||T2|| = 1` and certified `Lip(G) = lip_g`.
pub fn make_layer(space: Arc<Space>, seed: u64, spec: &LayerSpec) -> Result<NeuralOperatorLayer> {
    let m = space.dim();
    if spec.rank > m {
        return Err(Error::Infeasible(format!("rank {} exceeds ambient dimension {m}", spec.rank)));
    }
    if spec.lip_g < 0.0 {
        return Err(Error::invalid("lip_g must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omegas: Vec<f64> = (1..=spec.rank).map(|p| (p as f64).powf(-spec.decay)).collect();
    let (t1, t2) = match spec.frame {
        Frame::Aligned => (
            FiniteRankOperator::aligned(m, omegas.clone(), 0, 0)?,
            FiniteRankOperator::aligned(m, omegas, 0, 0)?,
        ),
        Frame::Random => {
            let support = spec.support.unwrap_or(m).min(m);
            let fam = |rng: &mut ChaCha8Rng| linalg::random_orthonormal(rng, m, spec.rank, support);
            let (a, b, c, d) = (fam(&mut rng)?, fam(&mut rng)?, fam(&mut rng)?, fam(&mut rng)?);
            (
                FiniteRankOperator::new(m, omegas.clone(), a, b)?,
                FiniteRankOperator::new(m, omegas, c, d)?,
            )
        }
    };
    let g = match &spec.g {
        GKind::Nemytskii { activation } => {
            let l = activation.lipschitz().ok_or_else(|| {
                Error::Infeasible("Nemytskii activation has no global Lipschitz constant".into())
            })?;
            Nonlinearity::Nemytskii {
                activation: *activation,
                scale: spec.lip_g / l,
            }
        }
        GKind::CoordinateNet {
            n,
            widths,
            activation,
            cert_radius,
        } => {
            if *n > m {
                return Err(Error::Infeasible(format!("network width {n} exceeds ambient dimension {m}")));
            }
            let widths = widths.clone().unwrap_or_else(|| vec![4 * n, 4 * n]);
            let net = if spec.lip_g == 0.0 {
                CoordinateNetwork::zero(*n)
            } else {
                CoordinateNetwork::random(&mut rng, *n, &widths, *activation, spec.lip_g, 0.1, *cert_radius)?
            };
            Nonlinearity::CoordinateNet { net }
        }
        GKind::AffineContraction { n, offset_scale } => {
            if *n > m {
                return Err(Error::Infeasible(format!("affine block {n} exceeds ambient dimension {m}")));
            }
            let a = linalg::random_matrix(&mut rng, *n, *n);
            let norm = spectral_norm(&a);
            Nonlinearity::AffineContraction {
                matrix: a * (spec.lip_g / norm),
                offset: linalg::random_vector(&mut rng, *n) * *offset_scale,
            }
        }
    };
    NeuralOperatorLayer::new(space, t1, t2, g)
}

/// One stage `x -> A(sigma(F(x)))`.
#[derive(Clone, Debug)]
pub struct Stage {
    pub layer: NeuralOperatorLayer,
    pub activation: PointwiseActivation,
    pub linear: LinearOperatorExpr,
}

/// `A_L o sigma o F_L o ... o A_1 o sigma o F_1`.
#[derive(Clone, Debug)]
pub struct GeneralizedNeuralOperator {
    space: Arc<Space>,
    pub stages: Vec<Stage>,
}

impl GeneralizedNeuralOperator {
    pub fn new(space: Arc<Space>, stages: Vec<Stage>) -> Result<Self> {
        for s in &stages {
            check_dim(space.dim(), s.layer.dim())?;
            s.linear.validate(space.dim())?;
        }
        Ok(GeneralizedNeuralOperator { space, stages })
    }

    pub fn eval(&self, x: &SpectralVector) -> Result<SpectralVector> {
        check_dim(self.space.dim(), x.dim())?;
        Ok(self.apply(x))
    }
}

impl Map for GeneralizedNeuralOperator {
    fn dim(&self) -> usize {
        self.space.dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        let mut y = x.clone();
        for s in &self.stages {
            let f = s.layer.apply(&y);
            let a = nemytskii_apply(&self.space, &s.activation, &f).expect("dimension checked");
            y = s.linear.apply(&a).expect("validated at construction");
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{CustomActivation, CustomFunction};
    use crate::spectral_core::sample_ball;

    fn space(m: usize) -> Arc<Space> {
        Arc::new(Space::fourier(m))
    }

    fn spec(g: GKind, lip_g: f64) -> LayerSpec {
        LayerSpec {
            rank: 4,
            decay: 1.0,
            lip_g,
            g,
            support: Some(8),
            frame: Frame::Random,
        }
    }

    #[test]
    fn eval_matches_manual_composition() {
        let sp = space(12);
        let layer = make_layer(
            sp.clone(),
            3,
            &spec(GKind::Nemytskii { activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 } }, 0.4),
        )
        .unwrap();
        for x in sample_ball(12, 1.0, 5, 1.0, 1) {
            let u = layer.t1.apply(&x).unwrap();
            let g = nemytskii_apply(&sp, &PointwiseActivation::LeakyRelu { slope_neg: 0.2 }, &u)
                .unwrap()
                .scale(0.4);
            let manual = &x + &layer.t2.apply(&g).unwrap();
            assert!((&layer.eval(&x).unwrap() - &manual).max_abs() < 1e-15);
        }
        assert!(layer.eval(&SpectralVector::zeros(5)).is_err());
    }

    #[test]
    fn identity_cases() {
        let sp = space(10);
        let x = &sample_ball(10, 1.0, 1, 0.0, 2)[0];
        let zero_g = make_layer(sp.clone(), 1, &spec(GKind::Nemytskii { activation: PointwiseActivation::Identity }, 0.0)).unwrap();
        assert_eq!(&zero_g.eval(x).unwrap(), x);
        let mut t2_zero = make_layer(sp.clone(), 1, &spec(GKind::AffineContraction { n: 3, offset_scale: 1.0 }, 0.5)).unwrap();
        t2_zero.t2 = FiniteRankOperator::zero(10);
        assert_eq!(&t2_zero.eval(x).unwrap(), x);
        assert_eq!(&NeuralOperatorLayer::identity(sp).eval(x).unwrap(), x);
    }

    #[test]
    fn make_layer_is_deterministic_and_on_target() {
        let sp = space(16);
        let kinds = [
            GKind::Nemytskii { activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 } },
            GKind::Nemytskii {
                activation: PointwiseActivation::Custom(CustomActivation::with_bounds(CustomFunction::Tanh)),
            },
            GKind::CoordinateNet {
                n: 4,
                widths: None,
                activation: CoordinateActivation::Groupsort2,
                cert_radius: None,
            },
            GKind::AffineContraction { n: 5, offset_scale: 0.1 },
        ];
        for g in kinds {
            let s = spec(g, 0.4);
            let a = make_layer(sp.clone(), 11, &s).unwrap();
            let b = make_layer(sp.clone(), 11, &s).unwrap();
            assert_eq!(a.to_doc().t1, b.to_doc().t1);
            assert_eq!(a.g, b.g);
            let lip = a.g_lipschitz().bound;
            assert!((lip - 0.4).abs() <= 0.02, "lip {lip}");
            assert!((a.t1.norm() - 1.0).abs() < 1e-15);
        }
        let too_big = LayerSpec { rank: 17, ..spec(GKind::AffineContraction { n: 2, offset_scale: 0.0 }, 0.1) };
        assert!(make_layer(sp, 1, &too_big).is_err());
    }

    #[test]
    fn layer_json_roundtrip() {
        let sp = space(8);
        let layer = make_layer(
            sp,
            4,
            &spec(
                GKind::CoordinateNet {
                    n: 3,
                    widths: Some(vec![6]),
                    activation: CoordinateActivation::Groupsort2,
                    cert_radius: None,
                },
                0.3,
            ),
        )
        .unwrap();
        let json = serde_json::to_string(&layer.to_doc()).unwrap();
        assert!(json.contains("\"schema\":1"));
        let back = NeuralOperatorLayer::from_doc(serde_json::from_str(&json).unwrap()).unwrap();
        let x = &sample_ball(8, 1.0, 1, 0.0, 7)[0];
        assert_eq!(back.eval(x).unwrap(), layer.eval(x).unwrap());
    }

    #[test]
    fn generalized_operator_order() {
        let sp = space(9);
        let relu = PointwiseActivation::LeakyRelu { slope_neg: 0.3 };
        let mk = |seed| make_layer(sp.clone(), seed, &spec(GKind::Nemytskii { activation: relu }, 0.3)).unwrap();
        let (f1, f2) = (mk(1), mk(2));
        let a1 = LinearOperatorExpr::Scalar { c: 0.5 };
        let a2 = LinearOperatorExpr::reflection_e1(9);
        let op = GeneralizedNeuralOperator::new(
            sp.clone(),
            vec![
                Stage { layer: f1.clone(), activation: relu, linear: a1.clone() },
                Stage { layer: f2.clone(), activation: relu, linear: a2.clone() },
            ],
        )
        .unwrap();
        for x in sample_ball(9, 1.0, 4, 1.0, 3) {
            let s1 = a1.apply(&nemytskii_apply(&sp, &relu, &f1.apply(&x)).unwrap()).unwrap();
            let s2 = a2.apply(&nemytskii_apply(&sp, &relu, &f2.apply(&s1)).unwrap()).unwrap();
            assert!((&op.eval(&x).unwrap() - &s2).max_abs() < 1e-15);
        }
    }
}
