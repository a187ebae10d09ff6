//! Densities and samplers for the Gaussian and Student-t families.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::{CholeskyFactor, LinalgError, Vector};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDegreesOfFreedom(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Log-density of `N(mu, L Lᵀ)` at `x`.
pub fn mvn_logpdf(x: &Vector, mu: &Vector, chol: &CholeskyFactor) -> Result<f64, LinalgError> {
    let d = chol.dim();
    for v in [x.len(), mu.len()] {
        if v != d {
            return Err(LinalgError::DimensionMismatch { expected: d, got: v });
        }
    }
    let w = chol.solve_lower(&(x - mu));
    Ok(-0.5 * d as f64 * LN_2PI - chol.half_log_det() - 0.5 * w.norm_squared())
}

/// `∇ₓ log N(x | mu, L Lᵀ) = -(L Lᵀ)⁻¹ (x - mu)`.
pub fn mvn_score(x: &Vector, mu: &Vector, chol: &CholeskyFactor) -> Vector {
    -chol.solve(&(x - mu))
}

pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// Draws `z ~ N(0, I)` and returns `(mu + L z, z)`.
pub fn mvn_sample_reparam<R: Rng + ?Sized>(
    mu: &Vector,
    chol: &CholeskyFactor,
    rng: &mut R,
) -> (Vector, Vector) {
    let z = standard_normal_vec(mu.len(), rng);
    let y = mu + chol.mul_vec(&z);
    (y, z)
}

pub fn normal_logpdf(x: f64, mean: f64, variance: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + variance.ln() + r * r / variance)
}

/// Log-density of the standard Student-t with `nu` degrees of freedom.
pub fn studentt_logpdf(x: f64, nu: f64) -> Result<f64, DistError> {
    if !(nu > 0.0) {
        return Err(DistError::InvalidDegreesOfFreedom(nu));
    }
    Ok(ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
        - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p())
}

/// `Z / sqrt(V / nu)` with `Z ~ N(0,1)`, `V ~ χ²_nu`.
pub fn studentt_sample<R: Rng + ?Sized>(nu: f64, rng: &mut R) -> Result<f64, DistError> {
    if !(nu > 0.0) {
        return Err(DistError::InvalidDegreesOfFreedom(nu));
    }
    let z: f64 = StandardNormal.sample(rng);
    let chi = ChiSquared::new(nu).map_err(|_| DistError::InvalidDegreesOfFreedom(nu))?;
    let v: f64 = chi.sample(rng);
    Ok(z / (v / nu).sqrt())
}

/// `log Σ exp(xᵢ)`, stable for any finite inputs; `-∞` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(1 + eᵗ)`.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
