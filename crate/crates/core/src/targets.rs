//! Unnormalized target log-densities `f(x)` with `π(x) ∝ exp f(x)`.

use std::cell::RefCell;

use rand::Rng;

use crate::dist::{mvn_logpdf, mvn_score, softplus, sigmoid, LN_2PI};
use crate::linalg::{CholeskyFactor, LinalgError, Matrix, Vector};
use crate::proposals::ScaleMixtureProposal;
use crate::rng::{RngStream, StreamRng};

pub trait Target {
    fn dim(&self) -> usize;

    /// `f(x)`; `-∞` outside the support.
    fn log_density(&self, x: &Vector) -> f64;

    /// `(f(x), ∇f(x))`, or `None` when no gradient is available.
    fn log_density_and_grad(&self, _x: &Vector) -> Option<(f64, Vector)> {
        None
    }

    fn has_gradient(&self) -> bool {
        false
    }

    fn grad_log_density(&self, x: &Vector) -> Option<Vector> {
        self.log_density_and_grad(x).map(|(_, g)| g)
    }
}

impl<T: Target + ?Sized> Target for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &Vector) -> f64 {
        (**self).log_density(x)
    }
    fn log_density_and_grad(&self, x: &Vector) -> Option<(f64, Vector)> {
        (**self).log_density_and_grad(x)
    }
    fn has_gradient(&self) -> bool {
        (**self).has_gradient()
    }
}

/// `f(x) = -½‖x‖²`.
#[derive(Debug, Clone)]
pub struct StdGaussian {
    pub d: usize,
}

impl StdGaussian {
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        Self { d }
    }
}

impl Target for StdGaussian {
    fn dim(&self) -> usize {
        self.d
    }
    fn log_density(&self, x: &Vector) -> f64 {
        -0.5 * x.norm_squared()
    }
    fn log_density_and_grad(&self, x: &Vector) -> Option<(f64, Vector)> {
        Some((-0.5 * x.norm_squared(), -x))
    }
    fn has_gradient(&self) -> bool {
        true
    }
}

/// Normalized `N(mu, L Lᵀ)`.
///
/// Shares its density and score code with the Gaussian proposal, so a
/// proposal built from the same `(mu, L)` reproduces it bit for bit.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub mu: Vector,
    pub chol: CholeskyFactor,
}

impl GaussianTarget {
    pub fn new(mu: Vector, chol: CholeskyFactor) -> Result<Self, LinalgError> {
        if mu.len() != chol.dim() {
            return Err(LinalgError::DimensionMismatch { expected: chol.dim(), got: mu.len() });
        }
        Ok(Self { mu, chol })
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mu.len()
    }
    fn log_density(&self, x: &Vector) -> f64 {
        mvn_logpdf(x, &self.mu, &self.chol).unwrap_or(f64::NAN)
    }
    fn log_density_and_grad(&self, x: &Vector) -> Option<(f64, Vector)> {
        Some((self.log_density(x), mvn_score(x, &self.mu, &self.chol)))
    }
    fn has_gradient(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct LogisticData {
    pub x: Matrix,
    pub y: Vector,
}

impl LogisticData {
    pub fn new(x: Matrix, y: Vector) -> Result<Self, String> {
        if x.nrows() != y.len() {
            return Err(format!("{} rows but {} labels", x.nrows(), y.len()));
        }
        if x.nrows() < x.ncols() {
            return Err(format!("N = {} is smaller than d = {}", x.nrows(), x.ncols()));
        }
        if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(format!("label {v} is not binary"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err("design matrix has non-finite entries".into());
        }
        Ok(Self { x, y })
    }
}

/// Bayesian logistic regression with a `N(0, v I)` prior.
#[derive(Debug, Clone)]
pub struct LogisticPosterior {
    data: LogisticData,
    prior_variance: f64,
}

impl LogisticPosterior {
    pub fn new(data: LogisticData, prior_variance: f64) -> Self {
        assert!(prior_variance > 0.0, "prior variance must be positive");
        Self { data, prior_variance }
    }

    pub fn data(&self) -> &LogisticData {
        &self.data
    }
}

impl Target for LogisticPosterior {
    fn dim(&self) -> usize {
        self.data.x.ncols()
    }

    fn log_density(&self, beta: &Vector) -> f64 {
        let t = &self.data.x * beta;
        // y log s(t) + (1-y) log(1-s(t)) = y t - softplus(t)
        let ll: f64 = t.iter().zip(self.data.y.iter()).map(|(&t, &y)| y * t - softplus(t)).sum();
        ll - beta.norm_squared() / (2.0 * self.prior_variance)
    }

    fn log_density_and_grad(&self, beta: &Vector) -> Option<(f64, Vector)> {
        let t = &self.data.x * beta;
        let mut ll = 0.0;
        let mut resid = Vector::zeros(t.len());
        for i in 0..t.len() {
            let y = self.data.y[i];
            ll += y * t[i] - softplus(t[i]);
            resid[i] = y - sigmoid(t[i]);
        }
        let f = ll - beta.norm_squared() / (2.0 * self.prior_variance);
        let g = self.data.x.tr_mul(&resid) - beta / self.prior_variance;
        Some((f, g))
    }

    fn has_gradient(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct GpData {
    pub x: Matrix,
    pub y: Vector,
}

/// Posterior over `(log σ², log σ_f², log ℓ²)` of a zero-mean GP with a
/// squared-exponential kernel and Gaussian noise, with the latent function
/// integrated out and a `N(0, v I)` prior on the log-hyperparameters.
#[derive(Debug, Clone)]
pub struct GpHyperPosterior {
    sqdist: Matrix,
    y: Vector,
    prior_variance: f64,
}

struct GpEval {
    log_lik: f64,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    kern: Matrix,
}

impl GpHyperPosterior {
    pub fn new(data: &GpData, prior_variance: f64) -> Self {
        assert!(prior_variance > 0.0, "prior variance must be positive");
        assert!(data.x.nrows() == data.y.len() && !data.y.is_empty());
        let n = data.x.nrows();
        let mut sqdist = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let d = (data.x.row(i) - data.x.row(j)).norm_squared();
                sqdist[(i, j)] = d;
                sqdist[(j, i)] = d;
            }
        }
        Self { sqdist, y: data.y.clone(), prior_variance }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn log_prior(&self, x: &Vector) -> f64 {
        -0.5 * x.norm_squared() / self.prior_variance
            - 0.5 * x.len() as f64 * (LN_2PI + self.prior_variance.ln())
    }

    fn eval(&self, x: &Vector) -> Result<GpEval, LinalgError> {
        if x.len() != 3 {
            return Err(LinalgError::DimensionMismatch { expected: 3, got: x.len() });
        }
        let (noise, sf2, ell2) = (x[0].exp(), x[1].exp(), x[2].exp());
        let n = self.n();
        let kern = self.sqdist.map(|d| sf2 * (-0.5 * d / ell2).exp());
        let mut kt = kern.clone();
        for i in 0..n {
            kt[(i, i)] += noise;
        }
        let chol = nalgebra::linalg::Cholesky::new(kt)
            .ok_or(LinalgError::NotPositiveDefinite { pivot: 0, value: f64::NAN })?;
        let l = chol.l_dirty();
        let mut half_log_det = 0.0;
        for k in 0..n {
            let v = l[(k, k)];
            if !(v > 0.0) || !v.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: k, value: v });
            }
            half_log_det += v.ln();
        }
        let w = l.solve_lower_triangular(&self.y).expect("positive diagonal");
        let log_lik = -0.5 * w.norm_squared() - half_log_det - 0.5 * n as f64 * LN_2PI;
        Ok(GpEval { log_lik, chol, kern })
    }

    /// `f(x)`, reporting a failed factorization of `K + σ²I`.
    pub fn try_log_density(&self, x: &Vector) -> Result<f64, LinalgError> {
        Ok(self.eval(x)?.log_lik + self.log_prior(x))
    }

    pub fn try_log_density_and_grad(&self, x: &Vector) -> Result<(f64, Vector), LinalgError> {
        let e = self.eval(x)?;
        let noise = x[0].exp();
        let ell2 = x[2].exp();
        let a = e.chol.solve(&self.y);
        let kinv = e.chol.inverse();
        let n = self.n();

        let mut g = Vector::zeros(3);
        // log σ²: ∂K̃ = σ² I
        let tr_kinv: f64 = (0..n).map(|i| kinv[(i, i)]).sum();
        g[0] = 0.5 * noise * (a.norm_squared() - tr_kinv);
        // log σ_f²: ∂K̃ = K;  log ℓ²: ∂K̃ = K ∘ D / (2ℓ²)
        let (mut q1, mut t1, mut q2, mut t2) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..n {
            for i in 0..n {
                let k = e.kern[(i, j)];
                let k2 = k * self.sqdist[(i, j)] / (2.0 * ell2);
                let aa = a[i] * a[j];
                let ki = kinv[(i, j)];
                q1 += aa * k;
                t1 += ki * k;
                q2 += aa * k2;
                t2 += ki * k2;
            }
        }
        g[1] = 0.5 * (q1 - t1);
        g[2] = 0.5 * (q2 - t2);
        g -= x / self.prior_variance;
        Ok((e.log_lik + self.log_prior(x), g))
    }
}

impl Target for GpHyperPosterior {
    fn dim(&self) -> usize {
        3
    }
    fn log_density(&self, x: &Vector) -> f64 {
        self.try_log_density(x).unwrap_or(f64::NEG_INFINITY)
    }
    fn log_density_and_grad(&self, x: &Vector) -> Option<(f64, Vector)> {
        self.try_log_density_and_grad(x).ok()
    }
    fn has_gradient(&self) -> bool {
        true
    }
}

/// Inverse-CDF draw from `p(g) = (1+g)⁻²`.
pub fn g_from_uniform(u: f64) -> f64 {
    u / (1.0 - u)
}

pub fn sample_g<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    g_from_uniform(rng.random::<f64>())
}

/// `log N(β | 0, g (XᵀX)⁻¹)` given the Cholesky factor `R` of `XᵀX`.
pub fn gprior_logpdf(beta: &Vector, xtx: &CholeskyFactor, g: f64) -> f64 {
    let d = beta.len() as f64;
    -0.5 * d * (LN_2PI + g.ln()) + xtx.half_log_det() - 0.5 * xtx.quad_form(beta) / g
}

/// Pseudo-marginal g-prior: `log (1/L) Σ N(β | 0, gᵢ (XᵀX)⁻¹)` with fresh
/// `gᵢ ~ (1+g)⁻²` per evaluation, drawn from a stream owned by the target.
///
/// The chain evaluates each proposed state once and keeps that value for the
/// current state, so the run is an exact pseudo-marginal sampler.
#[derive(Debug)]
pub struct GPriorPseudoMarginal {
    xtx: CholeskyFactor,
    l_mc: usize,
    aux: RefCell<StreamRng>,
}

impl GPriorPseudoMarginal {
    pub fn new(xtx: &Matrix, l_mc: usize, stream: RngStream) -> Result<Self, LinalgError> {
        assert!(l_mc >= 1, "need at least one g draw");
        Ok(Self { xtx: CholeskyFactor::decompose(xtx)?, l_mc, aux: RefCell::new(stream.rng()) })
    }

    pub fn xtx_factor(&self) -> &CholeskyFactor {
        &self.xtx
    }
}

impl Target for GPriorPseudoMarginal {
    fn dim(&self) -> usize {
        self.xtx.dim()
    }
    fn log_density(&self, beta: &Vector) -> f64 {
        let mut rng = self.aux.borrow_mut();
        let d = beta.len() as f64;
        let q = self.xtx.quad_form(beta);
        let base = -0.5 * d * LN_2PI + self.xtx.half_log_det();
        let terms: Vec<f64> = (0..self.l_mc)
            .map(|_| {
                let g = sample_g(&mut *rng);
                base - 0.5 * d * g.ln() - 0.5 * q / g
            })
            .collect();
        crate::dist::log_sum_exp(&terms) - (self.l_mc as f64).ln()
    }
}

/// The g-prior at a fixed `g`, evaluated through the scale-mixture proposal
/// code so that a one-component proposal at the same `g` matches it exactly.
#[derive(Debug, Clone)]
pub struct FixedGPrior {
    q: ScaleMixtureProposal,
}

impl FixedGPrior {
    pub fn new(xtx: &Matrix, g: f64) -> Result<Self, LinalgError> {
        let chol = CholeskyFactor::decompose(xtx)?;
        let q = ScaleMixtureProposal::new(vec![1.0], vec![g], chol)
            .map_err(|e| LinalgError::InvalidFactor(e.to_string()))?;
        Ok(Self { q })
    }
}

impl Target for FixedGPrior {
    fn dim(&self) -> usize {
        self.q.dim()
    }
    fn log_density(&self, beta: &Vector) -> f64 {
        self.q.logpdf(beta)
    }
}
