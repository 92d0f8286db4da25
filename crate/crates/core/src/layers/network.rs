//! Coordinate networks `R^N -> R^N` and residual chains built from them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, spectral_norm};
use crate::map::Map;
use crate::operators::CoordinateActivation;
use crate::spectral_core::SpectralVector;

/// One affine map `z -> W z + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    #[serde(with = "linalg::rows")]
    pub weight: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    pub bias: DVector<f64>,
}

impl Affine {
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.weight * z + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipLinear {
    #[serde(with = "linalg::rows")]
    pub matrix: DMatrix<f64>,
}

/// Upper bound on the Lipschitz constant, valid globally or on a ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzCertificate {
    pub bound: f64,
    /// Input-ball radius the bound is valid on; `None` means global.
    pub radius: Option<f64>,
}

impl LipschitzCertificate {
    pub fn global(bound: f64) -> Self {
        LipschitzCertificate { bound, radius: None }
    }

    pub fn is_finite(&self) -> bool {
        self.bound.is_finite()
    }
}

/// `NN(z) = A_L s(... s(A_1 z + b_1) ...) + b_L (+ S z)`, square `R^N -> R^N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinateNetwork {
    pub layers: Vec<Affine>,
    pub activation: CoordinateActivation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<SkipLinear>,
    /// Ball radius for activations without a global Lipschitz constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cert_radius: Option<f64>,
}

impl CoordinateNetwork {
    pub fn new(
        layers: Vec<Affine>,
        activation: CoordinateActivation,
        skip: Option<SkipLinear>,
        cert_radius: Option<f64>,
    ) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::invalid("a network needs at least one affine layer"));
        };
        let n = first.weight.ncols();
        let mut width = n;
        for layer in &layers {
            check_dim(width, layer.weight.ncols())?;
            check_dim(layer.weight.nrows(), layer.bias.len())?;
            width = layer.weight.nrows();
        }
        check_dim(n, width)?;
        if let Some(s) = &skip {
            check_dim(n, s.matrix.nrows())?;
            check_dim(n, s.matrix.ncols())?;
        }
        if matches!(activation, CoordinateActivation::Groupsort2)
            && layers[..layers.len() - 1].iter().any(|l| l.weight.nrows() % 2 == 1)
        {
            return Err(Error::invalid("groupsort2 needs even hidden widths"));
        }
        Ok(CoordinateNetwork {
            layers,
            activation,
            skip,
            cert_radius,
        })
    }

    /// Depth-0 network computing `0`.
    pub fn zero(n: usize) -> Self {
        CoordinateNetwork {
            layers: vec![Affine {
                weight: DMatrix::zeros(n, n),
                bias: DVector::zeros(n),
            }],
            activation: CoordinateActivation::Identity,
            skip: None,
            cert_radius: None,
        }
    }

    /// Depth-0 network `z -> matrix z`.
    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        CoordinateNetwork::new(
            vec![Affine {
                weight: matrix,
                bias: DVector::zeros(n),
            }],
            CoordinateActivation::Identity,
            None,
            None,
        )
    }

    /// Seeded network with hidden `widths`, rescaled so its certified bound equals `target_lip`.
    ///
    /// Hidden biases are drawn with standard deviation `bias_scale`; the output
    /// layer (weights and bias) carries the rescaling.
    pub fn random<R: Rng>(
        rng: &mut R,
        n: usize,
        widths: &[usize],
        activation: CoordinateActivation,
        target_lip: f64,
        bias_scale: f64,
        cert_radius: Option<f64>,
    ) -> Result<Self> {
        if target_lip < 0.0 {
            return Err(Error::invalid("target Lipschitz bound must be nonnegative"));
        }
        let mut dims = vec![n];
        dims.extend_from_slice(widths);
        dims.push(n);
        let layers: Vec<Affine> = dims
            .windows(2)
            .map(|w| Affine {
                weight: linalg::random_matrix(rng, w[1], w[0]) / (w[0] as f64).sqrt(),
                bias: linalg::random_vector(rng, w[1]) * bias_scale,
            })
            .collect();
        let mut net = CoordinateNetwork::new(layers, activation, None, cert_radius)?;
        let bound = net.certificate().bound;
        if !bound.is_finite() || bound == 0.0 {
            return Err(Error::Infeasible("cannot certify the random network".into()));
        }
        let last = net.layers.last_mut().expect("nonempty");
        let c = target_lip / bound;
        last.weight *= c;
        last.bias *= c;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let input = DVector::from_column_slice(z);
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                self.activation.apply_in_place(h.as_mut_slice());
            }
        }
        if let Some(s) = &self.skip {
            h += &s.matrix * input;
        }
        h.as_slice().to_vec()
    }

    /// Certified Lipschitz bound: product of spectral norms times activation
    /// constants; for recu, a ball-local bound on `cert_radius`.
    pub fn certificate(&self) -> LipschitzCertificate {
        let skip = self.skip.as_ref().map_or(0.0, |s| spectral_norm(&s.matrix));
        let last = self.layers.len() - 1;
        if let Some(l) = self.activation.lipschitz() {
            let prod: f64 = self.layers.iter().map(|a| spectral_norm(&a.weight)).product();
            return LipschitzCertificate::global(prod * l.powi(last as i32) + skip);
        }
        let Some(radius) = self.cert_radius else {
            return LipschitzCertificate {
                bound: f64::INFINITY,
                radius: None,
            };
        };
        // Only recu lacks a global constant: propagate the pre-activation radius.
        let mut range = radius;
        let mut lip = 1.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = spectral_norm(&layer.weight);
            lip *= w;
            if i < last {
                let pre = w * range + layer.bias.norm();
                lip *= 3.0 * pre * pre;
                range = pre * pre * pre;
            }
        }
        LipschitzCertificate {
            bound: lip + skip,
            radius: Some(radius),
        }
    }

    pub fn spectral_bound(&self) -> f64 {
        self.certificate().bound
    }
}

/// `x -> x + D_N NN(E_N x)` for a single network.
pub fn residual_block_apply(net: &CoordinateNetwork, x: &SpectralVector) -> SpectralVector {
    let n = net.input_dim();
    let out = net.eval(&x.coeffs()[..n]);
    let mut y = x.clone();
    for (a, b) in y.coeffs_mut()[..n].iter_mut().zip(out) {
        *a += b;
    }
    y
}

/// Composition of residual blocks `Id + D_N NN_t E_N`, first block acting first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualChain {
    pub ambient_dim: usize,
    pub n: usize,
    pub blocks: Vec<CoordinateNetwork>,
}

impl ResidualChain {
    pub fn new(ambient_dim: usize, n: usize, blocks: Vec<CoordinateNetwork>) -> Result<Self> {
        if n > ambient_dim {
            return Err(Error::invalid(format!("N = {n} exceeds ambient dimension {ambient_dim}")));
        }
        for b in &blocks {
            check_dim(n, b.input_dim())?;
        }
        Ok(ResidualChain {
            ambient_dim,
            n,
            blocks,
        })
    }

    /// Seeded chain whose blocks all certify at `lip`.
    pub fn random<R: Rng>(
        rng: &mut R,
        ambient_dim: usize,
        n: usize,
        count: usize,
        widths: &[usize],
        activation: CoordinateActivation,
        lip: f64,
        cert_radius: Option<f64>,
    ) -> Result<Self> {
        let blocks = (0..count)
            .map(|_| CoordinateNetwork::random(rng, n, widths, activation, lip, 0.1, cert_radius))
            .collect::<Result<Vec<_>>>()?;
        ResidualChain::new(ambient_dim, n, blocks)
    }

    pub fn block_apply(&self, k: usize, x: &SpectralVector) -> SpectralVector {
        residual_block_apply(&self.blocks[k], x)
    }

    pub fn eval(&self, x: &SpectralVector) -> Result<SpectralVector> {
        check_dim(self.ambient_dim, x.dim())?;
        Ok(self.apply(x))
    }
}

impl Map for ResidualChain {
    fn dim(&self) -> usize {
        self.ambient_dim
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        self.blocks
            .iter()
            .fold(x.clone(), |acc, b| residual_block_apply(b, &acc))
    }
}

/// One block of a chain viewed as a map.
pub struct BlockMap<'a> {
    pub ambient_dim: usize,
    pub net: &'a CoordinateNetwork,
}

impl Map for BlockMap<'_> {
    fn dim(&self) -> usize {
        self.ambient_dim
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        residual_block_apply(self.net, x)
    }
}

/// Residual chain whose blocks each certify `Lip <= delta < 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertibleResidualChain {
    pub chain: ResidualChain,
    pub delta: f64,
}

impl InvertibleResidualChain {
    pub fn new(chain: ResidualChain, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Refused(format!("delta = {delta} is not in (0, 1)")));
        }
        for (k, b) in chain.blocks.iter().enumerate() {
            let cert = b.certificate();
            if !cert.is_finite() {
                return Err(Error::Refused(format!("block {k} has no Lipschitz certificate")));
            }
            if cert.bound > delta * (1.0 + 1e-12) {
                return Err(Error::Refused(format!(
                    "block {k} certifies Lip <= {} > delta = {delta}",
                    cert.bound
                )));
            }
        }
        Ok(InvertibleResidualChain { chain, delta })
    }

    /// Whether every block certificate is global.
    pub fn is_globally_certified(&self) -> bool {
        self.chain.blocks.iter().all(|b| b.certificate().radius.is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::PointwiseActivation;
    use crate::spectral_core::sample_ball;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sampled_lip(net: &CoordinateNetwork, radius: f64, seed: u64) -> f64 {
        let n = net.input_dim();
        let pts = sample_ball(n, radius, 60, 0.0, seed);
        let mut best: f64 = 0.0;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                let fa = SpectralVector::new(net.eval(a.coeffs()));
                let fb = SpectralVector::new(net.eval(b.coeffs()));
                best = best.max(fa.distance(&fb) / a.distance(b));
            }
        }
        best
    }

    #[test]
    fn certificate_dominates_sampled_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [
            CoordinateActivation::Groupsort2,
            CoordinateActivation::LeakyRelu { slope_neg: 0.1 },
            CoordinateActivation::from(PointwiseActivation::Identity),
        ] {
            let net = CoordinateNetwork::random(&mut rng, 6, &[12, 12], act, 0.7, 0.1, None).unwrap();
            assert!((net.spectral_bound() - 0.7).abs() < 1e-12);
            assert!(sampled_lip(&net, 2.0, 1) <= 0.7 + 1e-12);
        }
        let recu = CoordinateNetwork::random(&mut rng, 4, &[8], CoordinateActivation::Recu, 0.5, 0.1, Some(1.5)).unwrap();
        let cert = recu.certificate();
        assert_eq!(cert.radius, Some(1.5));
        assert!(sampled_lip(&recu, 1.5, 2) <= cert.bound);
        let uncertified = CoordinateNetwork { cert_radius: None, ..recu };
        assert!(!uncertified.certificate().is_finite());
    }

    #[test]
    fn chain_examples() {
        let chain = ResidualChain::new(10, 4, vec![CoordinateNetwork::zero(4), CoordinateNetwork::zero(4)]).unwrap();
        let x = &sample_ball(10, 1.0, 1, 0.0, 3)[0];
        assert_eq!(&chain.eval(x).unwrap(), x);
        assert!(chain.eval(&SpectralVector::zeros(9)).is_err());
    }

    #[test]
    fn block_fixes_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chain = ResidualChain::random(&mut rng, 12, 5, 2, &[10], CoordinateActivation::Groupsort2, 0.5, None).unwrap();
        for x in sample_ball(12, 2.0, 20, 0.0, 4) {
            let y = chain.block_apply(0, &x);
            assert_eq!(&y.coeffs()[5..], &x.coeffs()[5..]);
        }
    }

    #[test]
    fn invertible_chain_certification() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ok = ResidualChain::random(&mut rng, 8, 4, 2, &[8], CoordinateActivation::Groupsort2, 0.9, None).unwrap();
        assert!(InvertibleResidualChain::new(ok, 0.9).is_ok());
        let bad = ResidualChain::random(&mut rng, 8, 4, 2, &[8], CoordinateActivation::Groupsort2, 1.5, None).unwrap();
        assert!(matches!(InvertibleResidualChain::new(bad.clone(), 1.5), Err(Error::Refused(_))));
        assert!(matches!(InvertibleResidualChain::new(bad, 0.9), Err(Error::Refused(_))));
    }

    #[test]
    fn network_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = CoordinateNetwork::random(&mut rng, 3, &[6], CoordinateActivation::Groupsort2, 0.5, 0.1, None).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: CoordinateNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
    }
}
