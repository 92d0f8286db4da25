//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use opdisc::layers::{make_layer, Frame, GKind, LayerSpec, NeuralOperatorLayer, ResidualChain};
use opdisc::{CoordinateActivation, PointwiseActivation, Space};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Leaky layer on a Fourier space of dimension `dim` with `Lip(G) = 0.5`.
pub fn leaky_layer(dim: usize, seed: u64) -> NeuralOperatorLayer {
    let spec = LayerSpec {
        rank: 4.min(dim),
        decay: 2.0,
        lip_g: 0.5,
        g: GKind::Nemytskii { activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 } },
        support: None,
        frame: Frame::Random,
    };
    make_layer(Arc::new(Space::fourier(dim)), seed, &spec).expect("valid layer spec")
}

/// Contractive groupsort chain acting on the first `n` coefficients.
pub fn groupsort_chain(ambient_dim: usize, n: usize, blocks: usize, seed: u64) -> ResidualChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ResidualChain::random(&mut rng, ambient_dim, n, blocks, &[4 * n, 4 * n], CoordinateActivation::Groupsort2, 0.9, None)
        .expect("valid chain")
}
