//! Analytic velocity fields with closed-form Jacobians.
//!
//! These implement [`VelocityField`] without any learned parameters and back
//! the oracle checks of the likelihood, attack, and baseline code: results
//! computed through the generic pipeline can be compared against values
//! known in closed form.

use crate::model::VelocityField;
use crate::tape::transpose;

/// `v(x, t) = 0`: zero transport, zero divergence.
#[derive(Debug, Clone)]
pub struct ZeroField {
    pub dim: usize,
}

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], _t: f64) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    fn input_vjp(&self, x: &[f64], _t: f64, _cotangent: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// Time-independent linear field `v(x, t) = A x` with `A` row-major.
#[derive(Debug, Clone)]
pub struct LinearField {
    dim: usize,
    a: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), dim * dim);
        LinearField { dim, a }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], _t: f64) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.a[i * d + j] * x[j]).sum())
            .collect()
    }

    fn input_vjp(&self, _x: &[f64], _t: f64, cotangent: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let at = transpose(&self.a, d, d);
        (0..d)
            .map(|i| (0..d).map(|j| at[i * d + j] * cotangent[j]).sum())
            .collect()
    }
}

/// Isotropic time-varying field `v(x, t) = c(t) x`. The Jacobian is
/// `c(t) I`, so its trace is exactly `c(t) * D`.
#[derive(Clone)]
pub struct IsotropicField<F: Fn(f64) -> f64> {
    dim: usize,
    coef: F,
}

impl<F: Fn(f64) -> f64> IsotropicField<F> {
    pub fn new(dim: usize, coef: F) -> Self {
        IsotropicField { dim, coef }
    }

    pub fn coef(&self, t: f64) -> f64 {
        (self.coef)(t)
    }
}

impl<F: Fn(f64) -> f64> VelocityField for IsotropicField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = (self.coef)(t);
        x.iter().map(|v| c * v).collect()
    }

    fn input_vjp(&self, _x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64> {
        let c = (self.coef)(t);
        cotangent.iter().map(|v| c * v).collect()
    }
}

/// Coefficient of the exact marginal velocity of a rectified flow between
/// two standard Gaussians: `(2t - 1) / (t^2 + (1-t)^2)`. The flow it
/// induces preserves the standard normal at every `t`.
pub fn gaussian_marginal_coef(t: f64) -> f64 {
    (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t))
}

/// The standard-Gaussian-to-standard-Gaussian marginal field
/// `v(x, t) = gaussian_marginal_coef(t) x`.
pub fn gaussian_marginal_field(dim: usize) -> IsotropicField<fn(f64) -> f64> {
    IsotropicField::new(dim, gaussian_marginal_coef)
}

/// Wraps a closure as a velocity field; the VJP falls back to central
/// finite differences, which is accurate enough for test stubs but O(D)
/// forward passes per probe.
pub struct FnField<F: Fn(&[f64], f64) -> Vec<f64>> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        (self.f)(x, t)
    }

    fn input_vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut out = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = (self.f)(&xp, t);
            xp[i] = x[i] - h;
            let fm = (self.f)(&xp, t);
            xp[i] = x[i];
            out[i] = fp
                .iter()
                .zip(&fm)
                .zip(cotangent)
                .map(|((p, m), c)| (p - m) / (2.0 * h) * c)
                .sum();
        }
        out
    }
}
