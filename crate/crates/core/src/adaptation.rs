//! Stochastic-gradient KL minimization of a Gaussian proposal.
//!
//! [`KlGradient`] is always an estimate of `∇_{μ,L} KL(q ‖ π)`; updates
//! subtract it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::StepRecord;
use crate::linalg::{CholeskyFactor, Matrix, Vector};
use crate::proposals::{gaussian_kl_to_standard, GaussianProposal, Proposal};

pub const MIN_DIAG: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptationError {
    #[error("target provides no gradient")]
    GradientUnavailable,
    #[error("non-finite gradient in batch {batch}")]
    NonFiniteGradient { batch: usize },
    #[error("adaptation needs a Gaussian proposal with recorded z draws")]
    NotGaussian,
    #[error("batch {batch} has no usable gradient")]
    EmptyBatch { batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientKind {
    Dsvi,
    Stl,
}

impl std::str::FromStr for GradientKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dsvi" => Ok(Self::Dsvi),
            "stl" => Ok(Self::Stl),
            other => Err(format!("unknown gradient estimator '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlGradient {
    pub g_mu: Vector,
    /// Lower triangular.
    pub g_l: Matrix,
}

impl KlGradient {
    pub fn zeros(d: usize) -> Self {
        Self { g_mu: Vector::zeros(d), g_l: Matrix::zeros(d, d) }
    }

    pub fn is_finite(&self) -> bool {
        self.g_mu.iter().chain(self.g_l.iter()).all(|v| v.is_finite())
    }

    /// `[μ (d entries), then the lower-triangular entries of L row by row]`.
    pub fn flatten(&self) -> Vec<f64> {
        let d = self.g_mu.len();
        let mut out = Vec::with_capacity(d + d * (d + 1) / 2);
        out.extend(self.g_mu.iter());
        for i in 0..d {
            for j in 0..=i {
                out.push(self.g_l[(i, j)]);
            }
        }
        out
    }
}

fn lower_outer(a: &Vector, z: &Vector) -> Matrix {
    let d = a.len();
    Matrix::from_fn(d, d, |i, j| if j <= i { a[i] * z[j] } else { 0.0 })
}

/// DSVI: `g_mu = -∇log π(y)`, `g_L = -lower(∇log π(y) zᵀ) - diag(1/Lₖₖ)`.
pub fn kl_grad_dsvi(grad_log_pi_y: &Vector, q: &GaussianProposal, z: &Vector) -> KlGradient {
    let mut g_l = -lower_outer(grad_log_pi_y, z);
    for k in 0..q.dim() {
        g_l[(k, k)] -= 1.0 / q.chol.lower()[(k, k)];
    }
    KlGradient { g_mu: -grad_log_pi_y, g_l }
}

/// Sticking the landing: the score of `q` replaces the entropy term, so the
/// estimate vanishes draw by draw when `q = π`.
pub fn kl_grad_stl(grad_log_pi_y: &Vector, q: &GaussianProposal, y: &Vector, z: &Vector) -> KlGradient {
    let r = grad_log_pi_y - q.score(y);
    KlGradient { g_l: -lower_outer(&r, z), g_mu: -r }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_mu: f64,
    pub step_l: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// With `Some(τ)`, step sizes shrink as `1/(1 + t/τ)` over updates `t`.
    #[serde(default)]
    pub decay: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { step_mu: 0.01, step_l: 0.005, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub step: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: Option<f64>,
}

impl AdamState {
    /// State for a `d`-dimensional Gaussian: `μ` entries use `step_mu`, the
    /// `L` entries `step_l`.
    pub fn new(d: usize, cfg: &AdamConfig) -> Self {
        let p = d + d * (d + 1) / 2;
        let mut step = vec![cfg.step_l; p];
        step[..d].iter_mut().for_each(|s| *s = cfg.step_mu);
        Self::with_steps(step, cfg)
    }

    pub fn with_steps(step: Vec<f64>, cfg: &AdamConfig) -> Self {
        let p = step.len();
        Self { m: vec![0.0; p], v: vec![0.0; p], t: 0, step, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, decay: cfg.decay }
    }

    /// Bias-corrected Adam; returns `delta = -step · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let scale = self.decay.map_or(1.0, |tau| 1.0 / (1.0 + (self.t - 1) as f64 / tau));
        let mut delta = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            delta[i] = -scale * self.step[i] * mh / (vh.sqrt() + self.eps);
        }
        delta
    }
}

/// Applies a flattened parameter delta, clamping `diag(L) ≥ 1e-8`.
pub fn apply_delta(q: &GaussianProposal, delta: &[f64]) -> GaussianProposal {
    let d = q.dim();
    let mu = &q.mu + Vector::from_column_slice(&delta[..d]);
    let mut l = q.chol.lower().clone();
    let mut k = d;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] += delta[k];
            k += 1;
        }
        l[(i, i)] = l[(i, i)].max(MIN_DIAG);
    }
    let chol = CholeskyFactor::from_lower(l).expect("clamped factor is valid");
    GaussianProposal { mu, chol }
}

pub fn mean_gradient(grads: &[KlGradient]) -> KlGradient {
    let d = grads[0].g_mu.len();
    let mut acc = KlGradient::zeros(d);
    for g in grads {
        acc.g_mu += &g.g_mu;
        acc.g_l += &g.g_l;
    }
    let n = grads.len() as f64;
    KlGradient { g_mu: acc.g_mu / n, g_l: acc.g_l / n }
}

/// One adaptation step from a batch of records generated under `q`.
///
/// Every proposed `y` enters the average, accepted or not. Records whose
/// target gradient could not be evaluated (a failed factorization in the
/// GP target, say) are skipped.
pub fn batch_update(
    q: &Proposal,
    batch: &[StepRecord],
    kind: GradientKind,
    adam: &mut AdamState,
    batch_index: usize,
) -> Result<Proposal, AdaptationError> {
    let g = q.as_gaussian().ok_or(AdaptationError::NotGaussian)?;
    let mut grads = Vec::with_capacity(batch.len());
    for r in batch {
        let z = r.z.as_ref().ok_or(AdaptationError::NotGaussian)?;
        let Some(gy) = r.grad_y.as_ref() else { continue };
        let kg = match kind {
            GradientKind::Dsvi => kl_grad_dsvi(gy, g, z),
            GradientKind::Stl => kl_grad_stl(gy, g, &r.y, z),
        };
        if !kg.is_finite() {
            return Err(AdaptationError::NonFiniteGradient { batch: batch_index });
        }
        grads.push(kg);
    }
    if grads.is_empty() {
        return Err(AdaptationError::EmptyBatch { batch: batch_index });
    }
    let delta = adam.step(&mean_gradient(&grads).flatten());
    Ok(Proposal::Gaussian(apply_delta(g, &delta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// `B`
    pub batch_size: usize,
    /// `ℓ`, recorded batches.
    pub n_batches: usize,
    /// Unrecorded adaptation batches before the first recorded one.
    pub burn_in_batches: usize,
    pub gradient: GradientKind,
    pub adam: AdamConfig,
    /// Report `KL(q ‖ N(0, I))` in the trace (standard Gaussian targets).
    pub track_kl: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            n_batches: 100,
            burn_in_batches: 0,
            gradient: GradientKind::Dsvi,
            adam: AdamConfig::default(),
            track_kl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub batch: usize,
    pub kl: Option<f64>,
    pub mean_alpha: f64,
    pub mu_norm: f64,
    pub log_det_l: f64,
}

impl TraceRow {
    pub fn new(batch: usize, q: &Proposal, mean_alpha: f64, track_kl: bool) -> Self {
        let (kl, mu_norm, log_det_l) = match q {
            Proposal::Gaussian(g) => {
                (track_kl.then(|| gaussian_kl_to_standard(g)), g.mu.norm(), g.chol.half_log_det())
            }
            _ => (None, f64::NAN, f64::NAN),
        };
        Self { batch, kl, mean_alpha, mu_norm, log_det_l }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::targets::{GaussianTarget, StdGaussian, Target};
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_zero_gradient_is_no_op() {
        let mut s = AdamState::new(2, &AdamConfig::default());
        assert!(s.step(&[0.0; 5]).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn adam_first_step_is_step_size() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::with_steps(vec![0.01], &cfg);
        let d = s.step(&[1.0]);
        assert_abs_diff_eq!(d[0], -0.01 / (1.0 + 1e-8), epsilon = 1e-15);
        for _ in 0..50 {
            assert!(s.step(&[1.0])[0] < 0.0);
        }
        let mut neg = AdamState::with_steps(vec![0.01], &cfg);
        assert!(neg.step(&[-3.0])[0] > 0.0);
    }

    #[test]
    fn decayed_step_under_constant_gradient() {
        let cfg = AdamConfig { decay: Some(10.0), ..AdamConfig::default() };
        let mut s = AdamState::with_steps(vec![0.01], &cfg);
        let first = s.step(&[1.0])[0];
        assert_abs_diff_eq!(first, -0.01 / (1.0 + 1e-8), epsilon = 1e-15);
        for _ in 0..9 {
            s.step(&[1.0]);
        }
        // m̂/√v̂ = 1 for a constant gradient, so only the schedule remains
        assert_abs_diff_eq!(s.step(&[1.0])[0], -0.01 / (1.0 + 1e-8) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn flatten_layout() {
        let g = KlGradient {
            g_mu: Vector::from_vec(vec![1.0, 2.0]),
            g_l: Matrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 5.0]),
        };
        assert_eq!(g.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn stl_vanishes_when_q_equals_pi() {
        let l = Matrix::from_row_slice(2, 2, &[1.5, 0.0, 0.3, 0.7]);
        let q = GaussianProposal::new(Vector::from_vec(vec![0.2, -1.0]), CholeskyFactor::from_lower(l).unwrap()).unwrap();
        let t = GaussianTarget::new(q.mu.clone(), q.chol.clone()).unwrap();
        let mut rng = RngStream::new(1, 0).rng();
        for _ in 0..1000 {
            let (y, z) = q.sample(&mut rng);
            let g = kl_grad_stl(&t.grad_log_density(&y).unwrap(), &q, &y, &z);
            assert!(g.flatten().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dsvi_one_dimensional_scale_gradient() {
        // KL = ½(L² - 1 - 2 log L) at μ = 0, so ∂/∂L = L - 1/L = 1.5 at L = 2
        let q = GaussianProposal::new(Vector::zeros(1), CholeskyFactor::scaled_identity(1, 4.0).unwrap()).unwrap();
        let t = StdGaussian::new(1);
        let mut rng = RngStream::new(2, 0).rng();
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let (y, z) = q.sample(&mut rng);
                kl_grad_dsvi(&t.grad_log_density(&y).unwrap(), &q, &z).g_l[(0, 0)]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 1.5).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn zero_step_size_leaves_proposal_unchanged() {
        let q = Proposal::Gaussian(GaussianProposal::standard(2));
        let cfg = AdamConfig { step_mu: 0.0, step_l: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(2, &cfg);
        let rec = StepRecord {
            x: Vector::zeros(2),
            y: Vector::from_vec(vec![1.0, 2.0]),
            alpha: 1.0,
            accepted: true,
            log_f_x: 0.0,
            log_f_y: 0.0,
            log_q_x: 0.0,
            log_q_y: 0.0,
            z: Some(Vector::from_vec(vec![1.0, 2.0])),
            grad_y: Some(Vector::from_vec(vec![-1.0, -2.0])),
        };
        let nq = batch_update(&q, &[rec], GradientKind::Dsvi, &mut adam, 0).unwrap();
        assert_eq!(nq, q);
    }

    #[test]
    fn diagonal_is_clamped() {
        let q = GaussianProposal::standard(1);
        let nq = apply_delta(&q, &[0.0, -5.0]);
        assert_eq!(nq.chol.lower()[(0, 0)], MIN_DIAG);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let q = Proposal::Gaussian(GaussianProposal::standard(1));
        let mut adam = AdamState::new(1, &AdamConfig::default());
        let rec = StepRecord {
            x: Vector::zeros(1),
            y: Vector::zeros(1),
            alpha: 1.0,
            accepted: true,
            log_f_x: 0.0,
            log_f_y: 0.0,
            log_q_x: 0.0,
            log_q_y: 0.0,
            z: Some(Vector::zeros(1)),
            grad_y: Some(Vector::from_element(1, f64::NAN)),
        };
        assert_eq!(
            batch_update(&q, &[rec], GradientKind::Stl, &mut adam, 7),
            Err(AdaptationError::NonFiniteGradient { batch: 7 })
        );
    }
}
