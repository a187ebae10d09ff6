//! Proposal densities `q` and the closed-form expectations `E_q[F]`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::dist::{
    log_sum_exp, mvn_logpdf, mvn_sample_reparam, mvn_score, standard_normal_vec, studentt_logpdf,
    studentt_sample, LN_2PI,
};
use crate::linalg::{CholeskyFactor, LinalgError, Matrix, Vector};
use crate::targets::gprior_logpdf;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("no closed-form E_q[F] for {function} under a {proposal} proposal")]
    UnsupportedPair { proposal: &'static str, function: String },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `N(mu, L Lᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProposal {
    pub mu: Vector,
    pub chol: CholeskyFactor,
}

impl GaussianProposal {
    pub fn new(mu: Vector, chol: CholeskyFactor) -> Result<Self, ProposalError> {
        if mu.len() != chol.dim() {
            return Err(ProposalError::DimensionMismatch { expected: chol.dim(), got: mu.len() });
        }
        Ok(Self { mu, chol })
    }

    pub fn standard(d: usize) -> Self {
        Self { mu: Vector::zeros(d), chol: CholeskyFactor::identity(d) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> Matrix {
        self.chol.covariance()
    }

    pub fn logpdf(&self, y: &Vector) -> f64 {
        mvn_logpdf(y, &self.mu, &self.chol).unwrap_or(f64::NAN)
    }

    /// `∇_y log q(y)`.
    pub fn score(&self, y: &Vector) -> Vector {
        mvn_score(y, &self.mu, &self.chol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vector, Vector) {
        mvn_sample_reparam(&self.mu, &self.chol, rng)
    }
}

/// `Σ wᵢ N(0, gᵢ (XᵀX)⁻¹)`, sampled as `β = R⁻ᵀ β′` with `β′ ~ N(0, gᵢ I)`
/// and `XᵀX = R Rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMixtureProposal {
    weights: Vec<f64>,
    scales: Vec<f64>,
    log_weights: Vec<f64>,
    xtx: CholeskyFactor,
}

impl ScaleMixtureProposal {
    /// `xtx` is the Cholesky factor of `XᵀX` (identity for an untransformed mixture).
    pub fn new(weights: Vec<f64>, scales: Vec<f64>, xtx: CholeskyFactor) -> Result<Self, ProposalError> {
        if weights.is_empty() || weights.len() != scales.len() {
            return Err(ProposalError::InvalidMixture(format!(
                "{} weights for {} scales",
                weights.len(),
                scales.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ProposalError::InvalidMixture(format!("weights sum to {total}")));
        }
        if weights.len() > 1 && weights.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
            return Err(ProposalError::InvalidMixture("weights must lie in (0, 1)".into()));
        }
        if scales.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(ProposalError::InvalidMixture("scales must be positive".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, scales, log_weights, xtx })
    }

    pub fn dim(&self) -> usize {
        self.xtx.dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn xtx_factor(&self) -> &CholeskyFactor {
        &self.xtx
    }

    pub fn logpdf(&self, beta: &Vector) -> f64 {
        let terms: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&self.scales)
            .map(|(lw, &g)| lw + gprior_logpdf(beta, &self.xtx, g))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = standard_normal_vec(self.dim(), rng) * self.scales[k].sqrt();
        self.xtx.solve_lower_t(&z)
    }
}

/// Standard Student-t with `nu` degrees of freedom (one-dimensional).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentTProposal {
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Gaussian(GaussianProposal),
    ScaleMixture(ScaleMixtureProposal),
    StudentT(StudentTProposal),
}

impl Proposal {
    pub fn dim(&self) -> usize {
        match self {
            Proposal::Gaussian(q) => q.dim(),
            Proposal::ScaleMixture(q) => q.dim(),
            Proposal::StudentT(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Proposal::Gaussian(_) => "gaussian",
            Proposal::ScaleMixture(_) => "scale-mixture",
            Proposal::StudentT(_) => "student-t",
        }
    }

    /// Draws `y`; the standard-normal `z` with `y = mu + L z` is returned
    /// for Gaussian proposals only.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vector, Option<Vector>) {
        match self {
            Proposal::Gaussian(q) => {
                let (y, z) = q.sample(rng);
                (y, Some(z))
            }
            Proposal::ScaleMixture(q) => (q.sample(rng), None),
            Proposal::StudentT(q) => {
                let v = studentt_sample(q.nu, rng).expect("nu validated at construction");
                (Vector::from_element(1, v), None)
            }
        }
    }

    pub fn logpdf(&self, y: &Vector) -> Result<f64, ProposalError> {
        if y.len() != self.dim() {
            return Err(ProposalError::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        Ok(match self {
            Proposal::Gaussian(q) => q.logpdf(y),
            Proposal::ScaleMixture(q) => q.logpdf(y),
            Proposal::StudentT(q) => studentt_logpdf(y[0], q.nu).unwrap_or(f64::NAN),
        })
    }

    pub fn as_gaussian(&self) -> Option<&GaussianProposal> {
        match self {
            Proposal::Gaussian(q) => Some(q),
            _ => None,
        }
    }
}

impl From<GaussianProposal> for Proposal {
    fn from(q: GaussianProposal) -> Self {
        Proposal::Gaussian(q)
    }
}

impl From<ScaleMixtureProposal> for Proposal {
    fn from(q: ScaleMixtureProposal) -> Self {
        Proposal::ScaleMixture(q)
    }
}

/// Gaussian linear-regression likelihood `f(y | β) = N(y | Xβ, σ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLikelihood {
    pub x: Matrix,
    pub y: Vector,
    pub sigma: f64,
}

impl GaussianLikelihood {
    pub fn log_eval(&self, beta: &Vector) -> f64 {
        let r = &self.y - &self.x * beta;
        let s2 = self.sigma * self.sigma;
        -0.5 * self.y.len() as f64 * (LN_2PI + s2.ln()) - 0.5 * r.norm_squared() / s2
    }

    /// `log C = -(N/2) log(2πσ²) - Σ yᵢ² / (2σ²)`.
    pub fn log_c(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        -0.5 * self.y.len() as f64 * (LN_2PI + s2.ln()) - 0.5 * self.y.norm_squared() / s2
    }

    /// `S = Σ yᵢ xᵢ = Xᵀ y`.
    pub fn s_vec(&self) -> Vector {
        self.x.tr_mul(&self.y)
    }
}

pub type ExternalFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// The functions `F` whose expectations are estimated.
#[derive(Clone)]
pub enum FunctionSpec {
    Coordinate(usize),
    CoordinateSquare(usize),
    Linear(Vector),
    /// `exp(aᵀx)`
    ExpLinear(Vector),
    /// The regression likelihood; evaluated on the log scale by callers that
    /// need to shift it (see [`FunctionSpec::log_eval`]).
    GaussianLikelihood(Arc<GaussianLikelihood>),
    External { name: String, f: ExternalFn },
}

impl fmt::Debug for FunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FunctionSpec {
    pub fn exp_coordinate(d: usize, k: usize) -> Self {
        let mut a = Vector::zeros(d);
        a[k] = 1.0;
        FunctionSpec::ExpLinear(a)
    }

    pub fn label(&self) -> String {
        match self {
            FunctionSpec::Coordinate(k) => format!("x{k}"),
            FunctionSpec::CoordinateSquare(k) => format!("x{k}^2"),
            FunctionSpec::Linear(_) => "linear".into(),
            FunctionSpec::ExpLinear(a) => match unit_index(a) {
                Some(k) => format!("exp(x{k})"),
                None => "exp(a'x)".into(),
            },
            FunctionSpec::GaussianLikelihood(_) => "likelihood".into(),
            FunctionSpec::External { name, .. } => name.clone(),
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<(), ProposalError> {
        let got = match self {
            FunctionSpec::Coordinate(k) | FunctionSpec::CoordinateSquare(k) => {
                if *k < d {
                    return Ok(());
                }
                k + 1
            }
            FunctionSpec::Linear(a) | FunctionSpec::ExpLinear(a) => a.len(),
            FunctionSpec::GaussianLikelihood(l) => l.x.ncols(),
            FunctionSpec::External { .. } => return Ok(()),
        };
        if got == d {
            Ok(())
        } else {
            Err(ProposalError::DimensionMismatch { expected: d, got })
        }
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        match self {
            FunctionSpec::Coordinate(k) => x[*k],
            FunctionSpec::CoordinateSquare(k) => x[*k] * x[*k],
            FunctionSpec::Linear(a) => a.dot(x),
            FunctionSpec::ExpLinear(a) => a.dot(x).exp(),
            FunctionSpec::GaussianLikelihood(l) => l.log_eval(x).exp(),
            FunctionSpec::External { f, .. } => f(x),
        }
    }

    /// `log F(x)` for the positive functions, `None` otherwise.
    pub fn log_eval(&self, x: &Vector) -> Option<f64> {
        match self {
            FunctionSpec::ExpLinear(a) => Some(a.dot(x)),
            FunctionSpec::GaussianLikelihood(l) => Some(l.log_eval(x)),
            _ => None,
        }
    }
}

fn unit_index(a: &Vector) -> Option<usize> {
    let nz: Vec<usize> = (0..a.len()).filter(|&i| a[i] != 0.0).collect();
    (nz.len() == 1 && a[nz[0]] == 1.0).then(|| nz[0])
}

fn unsupported(q: &Proposal, f: &FunctionSpec) -> ProposalError {
    ProposalError::UnsupportedPair { proposal: q.kind(), function: f.label() }
}

/// `E_q[F]` in closed form.
pub fn analytic_expectation(q: &Proposal, f: &FunctionSpec) -> Result<f64, ProposalError> {
    f.check_dim(q.dim())?;
    match (q, f) {
        (Proposal::Gaussian(g), FunctionSpec::Coordinate(k)) => Ok(g.mu[*k]),
        (Proposal::Gaussian(g), FunctionSpec::CoordinateSquare(k)) => {
            let row = g.chol.lower().row(*k);
            Ok(g.mu[*k] * g.mu[*k] + row.norm_squared())
        }
        (Proposal::Gaussian(g), FunctionSpec::Linear(a)) => Ok(a.dot(&g.mu)),
        (Proposal::Gaussian(_), FunctionSpec::ExpLinear(_))
        | (Proposal::ScaleMixture(_), FunctionSpec::GaussianLikelihood(_)) => {
            Ok(analytic_log_expectation(q, f)?.exp())
        }
        (Proposal::ScaleMixture(_), FunctionSpec::Coordinate(_) | FunctionSpec::Linear(_)) => Ok(0.0),
        (Proposal::ScaleMixture(m), FunctionSpec::CoordinateSquare(k)) => {
            let ainv = m.xtx.inverse();
            Ok(m.weights.iter().zip(&m.scales).map(|(w, g)| w * g).sum::<f64>() * ainv[(*k, *k)])
        }
        (Proposal::StudentT(t), FunctionSpec::Coordinate(_) | FunctionSpec::Linear(_)) if t.nu > 1.0 => Ok(0.0),
        (Proposal::StudentT(t), FunctionSpec::CoordinateSquare(_)) if t.nu > 2.0 => Ok(t.nu / (t.nu - 2.0)),
        _ => Err(unsupported(q, f)),
    }
}

/// `log E_q[F]` for the positive functions with closed forms.
pub fn analytic_log_expectation(q: &Proposal, f: &FunctionSpec) -> Result<f64, ProposalError> {
    f.check_dim(q.dim())?;
    match (q, f) {
        (Proposal::Gaussian(g), FunctionSpec::ExpLinear(a)) => Ok(a.dot(&g.mu) + 0.5 * g.chol.quad_form(a)),
        (Proposal::ScaleMixture(m), FunctionSpec::GaussianLikelihood(l)) => {
            let s2 = l.sigma * l.sigma;
            let d = m.dim() as f64;
            let w = m.xtx.solve_lower(&l.s_vec());
            let sas = w.norm_squared();
            let terms: Vec<f64> = m
                .log_weights
                .iter()
                .zip(&m.scales)
                .map(|(lw, &g)| lw - 0.5 * d * (g / s2).ln_1p() + g / (2.0 * s2 * (g + s2)) * sas)
                .collect();
            Ok(l.log_c() + log_sum_exp(&terms))
        }
        _ => analytic_expectation(q, f).and_then(|v| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(unsupported(q, f))
            }
        }),
    }
}

/// `KL(q ‖ N(0, I)) = ½(‖μ‖² + tr(LLᵀ) - d - log det(LLᵀ))`.
pub fn gaussian_kl_to_standard(q: &GaussianProposal) -> f64 {
    let d = q.dim() as f64;
    0.5 * (q.mu.norm_squared() + q.chol.lower().norm_squared() - d - 2.0 * q.chol.half_log_det())
}
