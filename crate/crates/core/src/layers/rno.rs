//! Residual neural operator blocks in kernel-coefficient form and the
//! embedding of coordinate residual chains into that form.
//!
//! A stage maps channels `u_j` to `W u + K u + b`, where
//! `(K u)_i = sum_{p,q} sum_j K_pq[i, j] <u_j, e_p> e_q` and the bias is a
//! constant function per channel.  All but the last stage apply the
//! activation pointwise through the quadrature grid.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::network::{CoordinateNetwork, ResidualChain};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::operators::{nemytskii_apply, PointwiseActivation};
use crate::spectral_core::{Space, SpectralVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    pub p: usize,
    pub q: usize,
    /// Channel mixing, output channels by input channels.
    #[serde(with = "linalg::rows")]
    pub matrix: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralOperatorStage {
    #[serde(with = "linalg::rows")]
    pub local: DMatrix<f64>,
    pub kernel: Vec<KernelEntry>,
    #[serde(with = "linalg::vector")]
    pub bias: DVector<f64>,
}

/// `u -> u + G(u)` with `G` a neural operator of rank `n`.
#[derive(Clone, Debug)]
pub struct ResidualNeuralOperatorBlock {
    space: Arc<Space>,
    pub n: usize,
    pub stages: Vec<NeuralOperatorStage>,
    pub activation: PointwiseActivation,
}

impl ResidualNeuralOperatorBlock {
    pub fn new(
        space: Arc<Space>,
        n: usize,
        stages: Vec<NeuralOperatorStage>,
        activation: PointwiseActivation,
    ) -> Result<Self> {
        if !space.has_constant_first() {
            return Err(Error::invalid("basis must start with the constant function"));
        }
        if n > space.dim() {
            return Err(Error::invalid("kernel rank exceeds ambient dimension"));
        }
        let mut channels = 1;
        for s in &stages {
            check_dim(channels, s.local.ncols())?;
            check_dim(s.local.nrows(), s.bias.len())?;
            for k in &s.kernel {
                if k.p >= n || k.q >= n {
                    return Err(Error::invalid("kernel index outside rank"));
                }
                check_dim(s.local.nrows(), k.matrix.nrows())?;
                check_dim(channels, k.matrix.ncols())?;
            }
            channels = s.local.nrows();
        }
        check_dim(1, channels)?;
        Ok(ResidualNeuralOperatorBlock {
            space,
            n,
            stages,
            activation,
        })
    }

    /// Whether every kernel coefficient vanishes.
    pub fn kernel_is_zero(&self) -> bool {
        self.stages
            .iter()
            .flat_map(|s| &s.kernel)
            .all(|k| k.matrix.iter().all(|v| *v == 0.0))
    }

    fn operator(&self, u: &SpectralVector) -> SpectralVector {
        let m = self.space.dim();
        let one = SpectralVector::unit(m, 0);
        let mut channels = vec![u.clone()];
        let last = self.stages.len() - 1;
        for (l, stage) in self.stages.iter().enumerate() {
            let mut next = vec![SpectralVector::zeros(m); stage.local.nrows()];
            for (i, out) in next.iter_mut().enumerate() {
                for (j, v) in channels.iter().enumerate() {
                    let w = stage.local[(i, j)];
                    if w != 0.0 {
                        out.axpy(w, v);
                    }
                }
                out.axpy(stage.bias[i], &one);
            }
            for k in &stage.kernel {
                for (i, out) in next.iter_mut().enumerate() {
                    let c: f64 = channels
                        .iter()
                        .enumerate()
                        .map(|(j, v)| k.matrix[(i, j)] * v.coeffs()[k.p])
                        .sum();
                    out.coeffs_mut()[k.q] += c;
                }
            }
            if l < last {
                for v in next.iter_mut() {
                    *v = nemytskii_apply(&self.space, &self.activation, v).expect("dimension checked");
                }
            }
            channels = next;
        }
        channels.pop().expect("single output channel")
    }

    pub fn eval(&self, u: &SpectralVector) -> Result<SpectralVector> {
        check_dim(self.space.dim(), u.dim())?;
        let mut y = self.operator(u);
        y.axpy(1.0, u);
        Ok(y)
    }
}

/// Rewrites each coordinate block `Id + D_N NN E_N` as a kernel-form block.
///
/// Inputs are lifted to constant channels `<u, e_p>` by the first kernel,
/// hidden layers act through local weights and constant biases, and the last
/// kernel maps channels back to coefficients.  An extra constant channel
/// carries the output bias.
pub fn resnet_to_rno(space: Arc<Space>, chain: &ResidualChain) -> Result<Vec<ResidualNeuralOperatorBlock>> {
    if !space.has_constant_first() {
        return Err(Error::invalid("basis must include the constant function at index 0"));
    }
    check_dim(space.dim(), chain.ambient_dim)?;
    chain
        .blocks
        .iter()
        .map(|net| embed_network(space.clone(), chain.n, net))
        .collect()
}

fn embed_network(space: Arc<Space>, n: usize, net: &CoordinateNetwork) -> Result<ResidualNeuralOperatorBlock> {
    if net.skip.is_some() {
        return Err(Error::invalid("skip connections have no kernel-form embedding"));
    }
    let activation = net
        .activation
        .pointwise()
        .ok_or_else(|| Error::invalid("kernel-form blocks need a pointwise activation"))?;
    let layers = &net.layers;
    if layers.len() == 1 {
        let a = &layers[0];
        if a.bias.iter().skip(1).any(|b| *b != 0.0) {
            return Err(Error::invalid(
                "a depth-0 network with a non-constant output bias has no kernel-form embedding",
            ));
        }
        let kernel = (0..n)
            .flat_map(|p| (0..n).map(move |q| (p, q)))
            .map(|(p, q)| KernelEntry {
                p,
                q,
                matrix: DMatrix::from_element(1, 1, a.weight[(q, p)]),
            })
            .collect();
        let stage = NeuralOperatorStage {
            local: DMatrix::zeros(1, 1),
            kernel,
            bias: DVector::from_element(1, a.bias[0]),
        };
        return ResidualNeuralOperatorBlock::new(space, n, vec![stage], activation);
    }
    let kappa = activation.eval(1.0);
    if kappa.abs() < 1e-8 {
        return Err(Error::invalid("activation vanishes at 1; no constant channel available"));
    }
    let mut stages = Vec::with_capacity(layers.len());
    let first = &layers[0];
    let w1 = first.weight.nrows();
    stages.push(NeuralOperatorStage {
        local: DMatrix::zeros(w1 + 1, 1),
        kernel: (0..n)
            .map(|p| {
                let mut col = DMatrix::zeros(w1 + 1, 1);
                col.view_mut((0, 0), (w1, 1)).copy_from(&first.weight.column(p));
                KernelEntry { p, q: 0, matrix: col }
            })
            .collect(),
        bias: {
            let mut b = DVector::from_element(w1 + 1, 1.0);
            b.rows_mut(0, w1).copy_from(&first.bias);
            b
        },
    });
    for layer in &layers[1..layers.len() - 1] {
        let (rows, cols) = layer.weight.shape();
        let mut local = DMatrix::zeros(rows + 1, cols + 1);
        local.view_mut((0, 0), (rows, cols)).copy_from(&layer.weight);
        let mut bias = DVector::from_element(rows + 1, 1.0);
        bias.rows_mut(0, rows).copy_from(&layer.bias);
        stages.push(NeuralOperatorStage {
            local,
            kernel: vec![],
            bias,
        });
    }
    let out = layers.last().expect("depth >= 1");
    let cols = out.weight.ncols();
    stages.push(NeuralOperatorStage {
        local: DMatrix::zeros(1, cols + 1),
        kernel: (0..n)
            .map(|q| {
                let mut row = DMatrix::zeros(1, cols + 1);
                row.view_mut((0, 0), (1, cols)).copy_from(&out.weight.row(q));
                row[(0, cols)] = out.bias[q] / kappa;
                KernelEntry { p: 0, q, matrix: row }
            })
            .collect(),
        bias: DVector::zeros(1),
    });
    ResidualNeuralOperatorBlock::new(space, n, stages, activation)
}
