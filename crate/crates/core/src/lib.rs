//! Numerical laboratory for discretizing neural operators on a truncated
//! `L2(0,1)`: certification of monotone layers, the linear discretization
//! functor, decomposition into near-identity blocks, fixed-point inversion,
//! and finite witnesses of singular Galerkin paths.

pub mod acceptance;
pub mod decompose;
pub mod discretize;
pub mod error;
pub mod galerkin_fem;
pub mod invert;
pub mod layers;
pub mod linalg;
pub mod map;
pub mod monotone;
pub mod nogo_isotopy;
pub mod operators;
pub mod quant;
pub mod report;
pub mod smooth;
pub mod spectral_core;

pub use error::{Error, Result};
pub use map::{jvp, FnMap, Map};
pub use operators::{
    CoordinateActivation, CustomActivation, CustomFunction, FiniteRankOperator, LinearOperatorExpr,
    PointwiseActivation,
};
pub use spectral_core::{BasisKind, BasisSpec, Space, SpectralVector, Subspace};
