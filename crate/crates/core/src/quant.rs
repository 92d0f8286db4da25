//! Measured discretization error next to the growth of network-size bounds
//! for approximating the discretized map on a ball.

use serde::{Deserialize, Serialize};

use crate::discretize::functor_a_error_on;
use crate::error::{Error, Result};
use crate::map::Map;
use crate::monotone::SAMPLE_DECAY;
use crate::report::fmt_float;
use crate::spectral_core::{project, sample_ball, SpectralVector, Subspace};

pub const QUANT_NOTE: &str =
    "networks are not synthesized; bound columns take C(d) = 1 and show relative scaling only";

pub const QUANT_HEADER: &str = "dim,epsilon_v,layers_bound,nonzeros_bound";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub dim: usize,
    pub epsilon_v: f64,
    /// `log2((1 + r) / eps)`.
    pub layers_bound: f64,
    /// `eps^-d log2((1 + r) / eps)`.
    pub nonzeros_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub note: String,
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<QuantRow>,
}

impl QuantReport {
    /// CSV preceded by a `#` line carrying the note.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n{QUANT_HEADER}\n", self.note);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.dim,
                fmt_float(r.epsilon_v),
                fmt_float(r.layers_bound),
                fmt_float(r.nonzeros_bound)
            ));
        }
        out
    }
}

/// Bound columns for a measured error; both are zero when the error is.
pub fn size_bounds(dim: usize, epsilon_v: f64, r: f64) -> (f64, f64) {
    if epsilon_v <= 0.0 {
        return (0.0, 0.0);
    }
    let layers = ((1.0 + r) / epsilon_v).log2();
    (layers, epsilon_v.powi(-(dim as i32)) * layers)
}

pub fn quant_report(f: &dyn Map, dims: &[usize], r: f64, n: usize, seed: u64) -> Result<QuantReport> {
    if dims.iter().any(|d| *d == 0 || *d > f.dim()) {
        return Err(Error::invalid("report dimensions must lie in 1..=ambient dimension"));
    }
    if n == 0 {
        return Err(Error::invalid("at least one sample is needed"));
    }
    let ambient = sample_ball(f.dim(), r, n, SAMPLE_DECAY, seed);
    let rows = dims
        .iter()
        .map(|&d| {
            let v = Subspace::prefix(d);
            let samples: Vec<SpectralVector> = ambient.iter().map(|x| project(x, &v)).collect();
            let epsilon_v = functor_a_error_on(f, &v, &samples);
            let (layers_bound, nonzeros_bound) = size_bounds(d, epsilon_v, r);
            QuantRow {
                dim: d,
                epsilon_v,
                layers_bound,
                nonzeros_bound,
            }
        })
        .collect();
    Ok(QuantReport {
        note: QUANT_NOTE.to_string(),
        radius: r,
        samples: n,
        seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{make_layer, Frame, GKind, LayerSpec, NeuralOperatorLayer};
    use crate::operators::PointwiseActivation;
    use crate::spectral_core::Space;
    use std::sync::Arc;

    #[test]
    fn identity_has_zero_error() {
        let id = NeuralOperatorLayer::identity(Arc::new(Space::fourier(32)));
        let rep = quant_report(&id, &[2, 4, 8], 1.0, 20, 3).unwrap();
        for r in &rep.rows {
            assert_eq!((r.epsilon_v, r.layers_bound, r.nonzeros_bound), (0.0, 0.0, 0.0));
        }
        assert!(rep.to_csv().contains(&format!("{QUANT_HEADER}\n")));
    }

    #[test]
    fn decaying_layer_rows() {
        let spec = LayerSpec {
            rank: 48,
            decay: 2.0,
            lip_g: 0.4,
            g: GKind::Nemytskii {
                activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 },
            },
            support: None,
            frame: Frame::Aligned,
        };
        let layer = make_layer(Arc::new(Space::fourier(48)), 7, &spec).unwrap();
        let rep = quant_report(&layer, &[4, 8, 16, 32], 1.0, 30, 11).unwrap();
        assert!(rep.rows.windows(2).all(|w| w[1].epsilon_v < w[0].epsilon_v));
        assert!(rep.rows.windows(2).all(|w| w[1].layers_bound > w[0].layers_bound));
        let (l1, _) = size_bounds(3, 0.1, 1.0);
        let (l2, n2) = size_bounds(3, 0.01, 1.0);
        assert!(l2 > l1 && (n2 - 1e6 * l2).abs() < 1e-6 * n2);
    }
}
