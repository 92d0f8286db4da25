//! Evaluable maps on the ambient space and finite-difference derivatives.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::spectral_core::SpectralVector;

/// A map from the ambient space to itself.
pub trait Map: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &SpectralVector) -> SpectralVector;
}

impl<T: Map + ?Sized> Map for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        (**self).apply(x)
    }
}

impl<T: Map + ?Sized> Map for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        (**self).apply(x)
    }
}

impl<T: Map + ?Sized> Map for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        (**self).apply(x)
    }
}

/// Wraps a closure as a [`Map`].
pub struct FnMap<F> {
    dim: usize,
    f: F,
}

impl<F> FnMap<F>
where
    F: Fn(&SpectralVector) -> SpectralVector + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnMap { dim, f }
    }
}

impl<F> Map for FnMap<F>
where
    F: Fn(&SpectralVector) -> SpectralVector + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        (self.f)(x)
    }
}

pub struct IdentityMap(pub usize);

impl Map for IdentityMap {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        x.clone()
    }
}

/// `x -> c * x`.
pub struct ScalarMap {
    pub dim: usize,
    pub c: f64,
}

impl Map for ScalarMap {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        x.scale(self.c)
    }
}

/// `x -> a(x) + weight * b(x)`.
pub struct Perturbed<A, B> {
    pub base: A,
    pub perturbation: B,
    pub weight: f64,
}

impl<A: Map, B: Map> Map for Perturbed<A, B> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn apply(&self, x: &SpectralVector) -> SpectralVector {
        let mut out = self.base.apply(x);
        out.axpy(self.weight, &self.perturbation.apply(x));
        out
    }
}

/// Central-difference directional derivative `(F(x+hv) - F(x-hv)) / 2h`.
pub fn jvp(f: &dyn Map, x: &SpectralVector, v: &SpectralVector, h: f64) -> SpectralVector {
    let mut plus = x.clone();
    plus.axpy(h, v);
    let mut minus = x.clone();
    minus.axpy(-h, v);
    let mut d = f.apply(&plus);
    d.axpy(-1.0, &f.apply(&minus));
    d.scale(0.5 / h)
}

/// Leading `d x d` block of the Jacobian at `x`, assembled column by column.
pub fn prefix_jacobian(f: &dyn Map, x: &SpectralVector, d: usize, h: f64) -> DMatrix<f64> {
    let m = f.dim();
    let mut jac = DMatrix::zeros(d, d);
    for k in 0..d {
        let col = jvp(f, x, &SpectralVector::unit(m, k), h);
        for i in 0..d {
            jac[(i, k)] = col.coeffs()[i];
        }
    }
    jac
}
