//! Marginal likelihoods of linear-regression sub-models under a mixture of
//! g-priors, estimated by IM with a fitted scale-mixture proposal.

use std::f64::consts::LN_10;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dist::{log_sum_exp, standard_normal_vec};
use crate::estimators::{est_imcv, vrf, Evaluated, EstimatorError};
use crate::kernel::{run_chain, KernelError};
use crate::linalg::{gram, CholeskyFactor, LinalgError, Matrix, Vector};
use crate::proposals::{analytic_log_expectation, GaussianLikelihood, FunctionSpec, Proposal, ProposalError, ScaleMixtureProposal};
use crate::quadrature::{integrate, QuadError};
use crate::rng::RngStream;
use crate::targets::{g_from_uniform, sample_g, GPriorPseudoMarginal, Target};

pub const SYNTHETIC_N: usize = 50;
pub const SYNTHETIC_P: usize = 4;
pub const SYNTHETIC_SIGMA: f64 = 2.5;

#[derive(Debug, Error)]
pub enum ModelSelectError {
    #[error("EM component {0} lost all responsibility mass")]
    EmptyComponent(usize),
    #[error("need K >= 1 and at least one sample")]
    BadInput,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// `y = Xβ + ε`, `ε ~ N(0, σ² I)` with known `σ`.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub x: Matrix,
    pub y: Vector,
    pub sigma: f64,
}

/// A sub-model: the zero-based covariate columns it keeps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Model(pub Vec<usize>);

impl Model {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `X13` style label with one-based indices.
    pub fn label(&self) -> String {
        let mut s = String::from("X");
        for c in &self.0 {
            s += &(c + 1).to_string();
        }
        s
    }

    /// All nonempty subsets of `{0..p}`, by size and then lexicographically.
    pub fn all_nonempty(p: usize) -> Vec<Model> {
        let mut out = Vec::new();
        for size in 1..=p {
            for mask in 0u32..(1 << p) {
                if mask.count_ones() as usize == size {
                    out.push(Model((0..p).filter(|j| mask & (1 << j) != 0).collect()));
                }
            }
        }
        out.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
        out
    }
}

/// Per-model quantities shared by the estimators and the oracle.
#[derive(Debug, Clone)]
pub struct SubModel {
    pub model: Model,
    pub likelihood: Arc<GaussianLikelihood>,
    /// Cholesky factor of `X_mᵀX_m`.
    pub xtx: CholeskyFactor,
}

impl RegressionProblem {
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn submodel(&self, model: &Model) -> Result<SubModel, LinalgError> {
        let xm = self.x.select_columns(model.0.iter());
        let xtx = if model.dim() == 0 { CholeskyFactor::identity(0) } else { CholeskyFactor::decompose(&gram(&xm))? };
        Ok(SubModel {
            model: model.clone(),
            likelihood: Arc::new(GaussianLikelihood { x: xm, y: self.y.clone(), sigma: self.sigma }),
            xtx,
        })
    }
}

/// `N` rows of four standard-normal covariates and `y ~ N(4x₃ + 4x₄, noise_sd²)`.
/// The likelihood always uses `σ = 2.5`.
pub fn gen_synthetic_with_noise<R: Rng + ?Sized>(rng: &mut R, noise_sd: f64) -> RegressionProblem {
    let n = SYNTHETIC_N;
    let mut x = Matrix::zeros(n, SYNTHETIC_P);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let row = standard_normal_vec(SYNTHETIC_P, rng);
        x.row_mut(i).copy_from(&row.transpose());
        let eps: f64 = standard_normal_vec(1, rng)[0];
        y[i] = 4.0 * row[2] + 4.0 * row[3] + noise_sd * eps;
    }
    RegressionProblem { x, y, sigma: SYNTHETIC_SIGMA }
}

pub fn gen_synthetic<R: Rng + ?Sized>(rng: &mut R) -> RegressionProblem {
    gen_synthetic_with_noise(rng, SYNTHETIC_SIGMA)
}

/// Draws `β' ~ N(0, g I)`, `g ~ (1+g)⁻²`.
pub fn sample_generic_prior<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vector> {
    (0..n)
        .map(|_| {
            let g = sample_g(rng);
            standard_normal_vec(d, rng) * g.sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureFit {
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
    pub em_trace: Vec<f64>,
    pub restarts: usize,
}

impl MixtureFit {
    /// The fitted mixture pushed through `β = R⁻ᵀ β'` with `R Rᵀ = X_mᵀX_m`.
    pub fn proposal(&self, xtx: &CholeskyFactor) -> Result<ScaleMixtureProposal, ProposalError> {
        ScaleMixtureProposal::new(self.weights.clone(), self.scales.clone(), xtx.clone())
    }
}

pub const EM_MAX_ITER: usize = 500;
pub const EM_REL_TOL: f64 = 1e-8;
pub const EM_MAX_RESTARTS: usize = 5;

fn percentile(sorted: &[f64], p: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * p).floor() as usize]
}

/// EM for `Σ wᵢ N(0, gᵢ I)` on zero-mean samples. Only `‖β'‖²` enters.
pub fn em_fit_scale_mixture(samples: &[Vector], k: usize) -> Result<MixtureFit, ModelSelectError> {
    if k == 0 || samples.is_empty() {
        return Err(ModelSelectError::BadInput);
    }
    let d = samples[0].len() as f64;
    let r2: Vec<f64> = samples.iter().map(|b| b.norm_squared()).collect();
    let mut per_dim: Vec<f64> = r2.iter().map(|r| r / d).collect();
    per_dim.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&per_dim, 0.01).max(1e-300).ln(), percentile(&per_dim, 0.99).max(1e-300).ln());
    let base: Vec<f64> = (0..k)
        .map(|i| if k == 1 { (0.5 * (lo + hi)).exp() } else { (lo + (hi - lo) * i as f64 / (k - 1) as f64).exp() })
        .collect();
    let mut last_err = ModelSelectError::BadInput;
    for restart in 0..=EM_MAX_RESTARTS {
        let init = if restart == 0 {
            base.clone()
        } else {
            let mut rng = RngStream::new(restart as u64, 0).rng();
            base.iter().map(|g| g * (0.5 * standard_normal_vec(1, &mut rng)[0]).exp()).collect()
        };
        match em_run(&r2, d, init) {
            Ok(mut fit) => {
                fit.restarts = restart;
                return Ok(fit);
            }
            Err(e) => {
                log::warn!("EM restart {}: {e}", restart + 1);
                last_err = e;
            }
        }
    }
    Err(last_err)
}

fn em_run(r2: &[f64], d: f64, mut scales: Vec<f64>) -> Result<MixtureFit, ModelSelectError> {
    let k = scales.len();
    let n = r2.len() as f64;
    let mut weights = vec![1.0 / k as f64; k];
    let mut trace = Vec::new();
    let mut resp = vec![0.0; k];
    for _ in 0..=EM_MAX_ITER {
        let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let mut ll = 0.0;
        let mut mass = vec![0.0; k];
        let mut wr2 = vec![0.0; k];
        for &r in r2 {
            for i in 0..k {
                resp[i] = lw[i] - 0.5 * d * (crate::dist::LN_2PI + scales[i].ln()) - 0.5 * r / scales[i];
            }
            let lse = log_sum_exp(&resp);
            ll += lse;
            for i in 0..k {
                let p = (resp[i] - lse).exp();
                mass[i] += p;
                wr2[i] += p * r;
            }
        }
        let done = trace.last().is_some_and(|&p: &f64| (ll - p).abs() <= EM_REL_TOL * p.abs());
        trace.push(ll);
        if done || trace.len() > EM_MAX_ITER {
            break;
        }
        for i in 0..k {
            if !(mass[i] > 1e-8 && wr2[i] > 0.0) {
                return Err(ModelSelectError::EmptyComponent(i));
            }
            scales[i] = wr2[i] / (d * mass[i]);
            weights[i] = mass[i] / n;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    if k > 1 && weights.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
        return Err(ModelSelectError::EmptyComponent(weights.iter().position(|&w| w <= 0.0).unwrap_or(0)));
    }
    Ok(MixtureFit { weights, scales, em_trace: trace, restarts: 0 })
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    best
}

/// `exp(v - shift)` where `shift` bounds `v` from above.
fn exp_shifted(v: f64, shift: f64) -> f64 {
    debug_assert!(shift.is_finite() && v <= shift + 1e-9, "unshifted exponent {v} vs {shift}");
    (v - shift).exp()
}

/// `log E_q[f(y | m, β)]` under the fitted mixture.
pub fn analytic_log_likelihood_expectation(sub: &SubModel, fit: &MixtureFit) -> Result<f64, ModelSelectError> {
    let q = Proposal::ScaleMixture(fit.proposal(&sub.xtx)?);
    Ok(analytic_log_expectation(&q, &FunctionSpec::GaussianLikelihood(sub.likelihood.clone()))?)
}

/// `log f(y | m)` by integrating the conditional-on-`g` marginal over the
/// hyperprior, using `g = u/(1-u)` so that `p(g) dg = du` on `[0, 1]`.
pub fn log_marginal_likelihood_oracle(sub: &SubModel) -> Result<f64, ModelSelectError> {
    let lik = &sub.likelihood;
    let s2 = lik.sigma * lik.sigma;
    let d = sub.model.dim() as f64;
    let sas = if sub.model.dim() == 0 { 0.0 } else { sub.xtx.solve_lower(&lik.s_vec()).norm_squared() };
    let log_h = |u: f64| {
        if u >= 1.0 {
            // g → ∞: (1+g/σ²)^(-d/2) → 0 unless d = 0
            return if d == 0.0 { sas / (2.0 * s2) } else { f64::NEG_INFINITY };
        }
        let g = g_from_uniform(u);
        -0.5 * d * (g / s2).ln_1p() + sas / (2.0 * s2) * (g / (g + s2))
    };
    let m = (0..=2000).map(|i| log_h(i as f64 / 2000.0)).fold(f64::NEG_INFINITY, f64::max);
    let r = integrate(|u| (log_h(u) - m).exp(), 0.0, 1.0, 1e-13)?;
    Ok(lik.log_c() + m + r.value.ln())
}

/// The oracle on the `-log₁₀` reporting scale.
pub fn marginal_likelihood_oracle(sub: &SubModel) -> Result<f64, ModelSelectError> {
    Ok(-log_marginal_likelihood_oracle(sub)? / LN_10)
}

/// One replica's estimate, stored as the ratio to the analytic `E_q[F]` so
/// that replicas with different internal shifts share one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalEstimate {
    /// `estimate / E_q[f(y|m,β)]`.
    pub ratio: f64,
    pub log_reference: f64,
    pub acceptance_rate: f64,
}

impl MarginalEstimate {
    pub fn neg_log10(&self) -> f64 {
        neg_log10_from_ratio(self.log_reference, self.ratio)
    }
}

pub fn neg_log10_from_ratio(log_reference: f64, ratio: f64) -> f64 {
    -(log_reference + ratio.ln()) / LN_10
}

/// IMCV estimate of `f(y | m)` with the chain targeting `target` (a prior
/// density for `β_m`) through the proposal `q`. Likelihood values are shifted
/// by their maximum over the trajectory and `E_q[F]` before any arithmetic.
pub fn estimate_marginal_im_with<T: Target>(
    sub: &SubModel,
    target: T,
    q: &ScaleMixtureProposal,
    n: usize,
    burn_in: usize,
    stream: RngStream,
) -> Result<MarginalEstimate, ModelSelectError> {
    let q = Proposal::ScaleMixture(q.clone());
    let f = FunctionSpec::GaussianLikelihood(sub.likelihood.clone());
    let log_eq = analytic_log_expectation(&q, &f)?;
    let traj = run_chain(target, &q, n, burn_in, &[], stream, &sub.model.label())?;
    let lfx: Vec<f64> = traj.records.iter().map(|r| sub.likelihood.log_eval(&r.x)).collect();
    let lfy: Vec<f64> = traj.records.iter().map(|r| sub.likelihood.log_eval(&r.y)).collect();
    let shift = lfx.iter().chain(&lfy).copied().fold(log_eq, f64::max);
    let ev = Evaluated::new(
        lfx.iter().map(|&v| exp_shifted(v, shift)).collect(),
        lfy.iter().map(|&v| exp_shifted(v, shift)).collect(),
        traj.records.iter().map(|r| r.alpha).collect(),
    )?;
    let est = est_imcv(&ev, exp_shifted(log_eq, shift))?;
    Ok(MarginalEstimate {
        ratio: est.value * (shift - log_eq).exp(),
        log_reference: log_eq,
        acceptance_rate: traj.acceptance_rate(),
    })
}

/// Pseudo-marginal prior with `l_mc` hyperprior draws per evaluation.
pub fn estimate_marginal_im(
    sub: &SubModel,
    fit: &MixtureFit,
    n: usize,
    l_mc: usize,
    stream: RngStream,
) -> Result<MarginalEstimate, ModelSelectError> {
    let target = GPriorPseudoMarginal::new(&sub.xtx.covariance(), l_mc, stream.child(1))?;
    estimate_marginal_im_with(sub, target, &fit.proposal(&sub.xtx)?, n, 0, stream)
}

/// Plain Monte Carlo: the likelihood averaged over exact prior draws.
pub fn estimate_marginal_cmc(
    sub: &SubModel,
    fit: &MixtureFit,
    n: usize,
    stream: RngStream,
) -> Result<MarginalEstimate, ModelSelectError> {
    let log_eq = analytic_log_likelihood_expectation(sub, fit)?;
    let mut rng = stream.rng();
    let lf: Vec<f64> = (0..n)
        .map(|_| {
            let g = sample_g(&mut rng);
            let z = standard_normal_vec(sub.model.dim(), &mut rng) * g.sqrt();
            sub.likelihood.log_eval(&sub.xtx.solve_lower_t(&z))
        })
        .collect();
    let shift = lf.iter().copied().fold(log_eq, f64::max);
    let mean = lf.iter().map(|&v| exp_shifted(v, shift)).sum::<f64>() / n as f64;
    Ok(MarginalEstimate { ratio: mean * (shift - log_eq).exp(), log_reference: log_eq, acceptance_rate: f64::NAN })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanConfig {
    pub k: usize,
    pub n: usize,
    pub replicas: usize,
    pub l_mc: usize,
    pub em_samples: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { k: 4, n: 1000, replicas: 100, l_mc: 100, em_samples: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelRow {
    pub model: String,
    pub dim: usize,
    pub neg_log10_imcv: f64,
    pub neg_log10_cmc: f64,
    pub oracle: f64,
    pub vrf: f64,
    pub acceptance_rate: f64,
    pub imcv: Vec<MarginalEstimate>,
    pub cmc: Vec<MarginalEstimate>,
    pub error: Option<String>,
}

impl ModelRow {
    fn failed(model: &Model, e: impl std::fmt::Display) -> Self {
        Self {
            model: model.label(),
            dim: model.dim(),
            neg_log10_imcv: f64::NAN,
            neg_log10_cmc: f64::NAN,
            oracle: f64::NAN,
            vrf: f64::NAN,
            acceptance_rate: f64::NAN,
            imcv: vec![],
            cmc: vec![],
            error: Some(e.to_string()),
        }
    }
}

fn replica_mean(xs: &[MarginalEstimate]) -> f64 {
    xs.iter().map(|e| e.ratio).sum::<f64>() / xs.len() as f64
}

/// Mixture fits for dimensions `1..=p`, each from its own generic-prior sample.
pub fn fit_generic_mixtures(p: usize, cfg: &ScanConfig) -> Result<Vec<MixtureFit>, ModelSelectError> {
    let master = RngStream::new(cfg.seed, u64::MAX);
    (1..=p)
        .map(|d| {
            let samples = sample_generic_prior(d, cfg.em_samples, &mut master.child(d as u64).rng());
            em_fit_scale_mixture(&samples, cfg.k)
        })
        .collect()
}

/// IMCV and CMC over all nonempty sub-models. Replica `t` of model `j` uses
/// stream `t` of the master seed, split by model; per-model failures are
/// reported in the row.
pub fn run_model_scan(problem: &RegressionProblem, cfg: &ScanConfig) -> Result<Vec<ModelRow>, ModelSelectError> {
    let fits = fit_generic_mixtures(problem.p(), cfg)?;
    let models = Model::all_nonempty(problem.p());
    Ok(models
        .par_iter()
        .enumerate()
        .map(|(j, model)| scan_one(problem, model, &fits[model.dim() - 1], j, cfg).unwrap_or_else(|e| ModelRow::failed(model, e)))
        .collect())
}

fn scan_one(
    problem: &RegressionProblem,
    model: &Model,
    fit: &MixtureFit,
    j: usize,
    cfg: &ScanConfig,
) -> Result<ModelRow, ModelSelectError> {
    let sub = problem.submodel(model)?;
    let oracle = marginal_likelihood_oracle(&sub)?;
    let streams: Vec<RngStream> = (0..cfg.replicas).map(|t| RngStream::new(cfg.seed, t as u64).child(j as u64)).collect();
    let imcv = streams
        .par_iter()
        .map(|s| estimate_marginal_im(&sub, fit, cfg.n, cfg.l_mc, s.child(0)))
        .collect::<Result<Vec<_>, _>>()?;
    let cmc = streams
        .par_iter()
        .map(|s| estimate_marginal_cmc(&sub, fit, cfg.n, s.child(2)))
        .collect::<Result<Vec<_>, _>>()?;
    let log_ref = imcv[0].log_reference;
    let ri: Vec<f64> = imcv.iter().map(|e| e.ratio).collect();
    let rc: Vec<f64> = cmc.iter().map(|e| e.ratio).collect();
    Ok(ModelRow {
        model: model.label(),
        dim: model.dim(),
        neg_log10_imcv: neg_log10_from_ratio(log_ref, replica_mean(&imcv)),
        neg_log10_cmc: neg_log10_from_ratio(log_ref, replica_mean(&cmc)),
        oracle,
        vrf: match vrf(&rc, &ri) {
            Ok(v) => v,
            Err(EstimatorError::ZeroDenominator) => f64::INFINITY,
            Err(e) => return Err(e.into()),
        },
        acceptance_rate: imcv.iter().map(|e| e.acceptance_rate).sum::<f64>() / imcv.len() as f64,
        imcv,
        cmc,
        error: None,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::normal_logpdf;
    use crate::targets::FixedGPrior;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn toy() -> RegressionProblem {
        RegressionProblem {
            x: Matrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]),
            y: Vector::from_vec(vec![1.0, -0.5, 2.5]),
            sigma: 1.2,
        }
    }

    #[test]
    fn synthetic_shapes_and_noiseless_recipe() {
        let mut rng = RngStream::new(1, 0).rng();
        let p = gen_synthetic(&mut rng);
        assert_eq!((p.x.shape(), p.y.len(), p.sigma), ((50, 4), 50, 2.5));
        let q = gen_synthetic_with_noise(&mut rng, 0.0);
        for i in 0..50 {
            assert_eq!(q.y[i], 4.0 * q.x[(i, 2)] + 4.0 * q.x[(i, 3)]);
        }
    }

    #[test]
    fn synthetic_least_squares_recovers_coefficients() {
        let p = gen_synthetic(&mut RngStream::new(2, 0).rng());
        let x = p.x.select_columns([2usize, 3].iter());
        let xtx = CholeskyFactor::decompose(&gram(&x)).unwrap();
        let beta = xtx.solve(&x.tr_mul(&p.y));
        let resid = &p.y - &x * &beta;
        let s2 = resid.norm_squared() / (50.0 - 2.0);
        let cov = xtx.inverse() * s2;
        for k in 0..2 {
            assert!((beta[k] - 4.0).abs() < 3.0 * cov[(k, k)].sqrt(), "beta {beta}");
        }
    }

    #[test]
    fn fifteen_models_in_order() {
        let ms = Model::all_nonempty(4);
        assert_eq!(ms.len(), 15);
        assert_eq!(ms[0].label(), "X1");
        assert_eq!(ms[4].label(), "X12");
        assert_eq!(ms[14].label(), "X1234");
    }

    #[test]
    fn one_component_em_is_closed_form() {
        let s = sample_generic_prior(3, 500, &mut RngStream::new(3, 0).rng());
        let fit = em_fit_scale_mixture(&s, 1).unwrap();
        let ms = s.iter().map(|b| b.norm_squared()).sum::<f64>() / 500.0;
        assert_relative_eq!(fit.scales[0], ms / 3.0, max_relative = 1e-12);
        assert_eq!(fit.weights, vec![1.0]);
    }

    #[test]
    fn one_component_recovers_fixed_scale() {
        let d = 2;
        let n = 20000;
        let mut rng = RngStream::new(4, 0).rng();
        let s: Vec<Vector> = (0..n).map(|_| standard_normal_vec(d, &mut rng) * 2f64.sqrt()).collect();
        let fit = em_fit_scale_mixture(&s, 1).unwrap();
        // ‖β'‖²/d has variance 2g²/d
        let se = (2.0 * 4.0 / d as f64 / n as f64).sqrt();
        assert!((fit.scales[0] - 2.0).abs() < 3.0 * se, "{:?}", fit.scales);
    }

    #[test]
    fn em_trace_is_monotone_and_simplex() {
        for (d, seed) in [(1, 5), (2, 6), (4, 7)] {
            let s = sample_generic_prior(d, 1000, &mut RngStream::new(seed, 0).rng());
            let fit = em_fit_scale_mixture(&s, 4).unwrap();
            for w in fit.em_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10 * w[0].abs(), "{:?}", fit.em_trace);
            }
            assert_abs_diff_eq!(fit.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(fit.scales.iter().all(|&g| g > 0.0));
        }
    }

    #[test]
    fn fitted_mixture_matches_generic_prior_in_ks() {
        let d = 3;
        let s = sample_generic_prior(d, 1000, &mut RngStream::new(8, 0).rng());
        let fit = em_fit_scale_mixture(&s, 4).unwrap();
        let q = fit.proposal(&CholeskyFactor::identity(d)).unwrap();
        let mut rng = RngStream::new(9, 0).rng();
        let a: Vec<f64> = (0..10_000).map(|_| q.sample(&mut rng).norm()).collect();
        let b: Vec<f64> = sample_generic_prior(d, 10_000, &mut rng).iter().map(|v| v.norm()).collect();
        assert!(ks_distance(&a, &b) < 0.05);
    }

    #[test]
    fn ks_distance_cases() {
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }

    #[test]
    fn transformed_mixture_covariance() {
        let p = gen_synthetic(&mut RngStream::new(10, 0).rng());
        let sub = p.submodel(&Model(vec![0, 2, 3])).unwrap();
        let fit = MixtureFit { weights: vec![0.3, 0.7], scales: vec![0.5, 4.0], em_trace: vec![], restarts: 0 };
        let q = fit.proposal(&sub.xtx).unwrap();
        let mut rng = RngStream::new(11, 0).rng();
        let n = 200_000;
        let mut cov = Matrix::zeros(3, 3);
        for _ in 0..n {
            let b = q.sample(&mut rng);
            cov += &b * b.transpose();
        }
        cov /= n as f64;
        let expect = sub.xtx.inverse() * (0.3 * 0.5 + 0.7 * 4.0);
        for i in 0..3 {
            assert_relative_eq!(cov[(i, i)], expect[(i, i)], max_relative = 0.05);
        }
    }

    #[test]
    fn null_model_oracle_is_closed_form() {
        let p = toy();
        let sub = p.submodel(&Model(vec![])).unwrap();
        let exact: f64 = p.y.iter().map(|&y| normal_logpdf(y, 0.0, p.sigma * p.sigma)).sum();
        assert_abs_diff_eq!(log_marginal_likelihood_oracle(&sub).unwrap(), exact, epsilon = 1e-12);
    }

    #[test]
    fn toy_oracle_matches_brute_force() {
        let p = toy();
        let sub = p.submodel(&Model(vec![0])).unwrap();
        let xtx = sub.xtx.covariance()[(0, 0)];
        let lik = sub.likelihood.clone();
        let inner = |u: f64| {
            if u <= 0.0 || u >= 1.0 {
                return 0.0;
            }
            let g = g_from_uniform(u);
            let var = g / xtx;
            integrate(
                |b| (lik.log_eval(&Vector::from_element(1, b)) + normal_logpdf(b, 0.0, var)).exp(),
                f64::NEG_INFINITY,
                f64::INFINITY,
                1e-16,
            )
            .unwrap()
            .value
        };
        let brute = integrate(inner, 0.0, 1.0, 1e-14).unwrap().value.ln();
        assert_relative_eq!(log_marginal_likelihood_oracle(&sub).unwrap(), brute, max_relative = 1e-6);
    }

    #[test]
    fn point_mass_mixture_is_likelihood_at_zero() {
        let p = toy();
        let sub = p.submodel(&Model(vec![0])).unwrap();
        let fit = MixtureFit { weights: vec![1.0], scales: vec![1e-14], em_trace: vec![], restarts: 0 };
        let v = analytic_log_likelihood_expectation(&sub, &fit).unwrap();
        assert_abs_diff_eq!(v, sub.likelihood.log_eval(&Vector::zeros(1)), epsilon = 1e-9);
    }

    #[test]
    fn exact_proposal_collapses_to_expectation() {
        let p = gen_synthetic(&mut RngStream::new(12, 0).rng());
        let sub = p.submodel(&Model(vec![1, 3])).unwrap();
        let fit = MixtureFit { weights: vec![1.0], scales: vec![3.0], em_trace: vec![], restarts: 0 };
        let target = FixedGPrior::new(&sub.xtx.covariance(), 3.0).unwrap();
        let est = estimate_marginal_im_with(&sub, target, &fit.proposal(&sub.xtx).unwrap(), 500, 0, RngStream::new(13, 0)).unwrap();
        assert_eq!(est.acceptance_rate, 1.0);
        assert_relative_eq!(est.ratio, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn toy_estimates_agree_with_oracle() {
        let p = toy();
        let sub = p.submodel(&Model(vec![0])).unwrap();
        let s = sample_generic_prior(1, 1000, &mut RngStream::new(14, 0).rng());
        let fit = em_fit_scale_mixture(&s, 4).unwrap();
        let oracle = log_marginal_likelihood_oracle(&sub).unwrap();
        let reps: Vec<f64> = (0..100)
            .map(|t| estimate_marginal_im(&sub, &fit, 1000, 100, RngStream::new(15, t)).unwrap())
            .map(|e| e.ratio * (e.log_reference - oracle).exp())
            .collect();
        let m = reps.iter().sum::<f64>() / 100.0;
        let se = (crate::estimators::sample_variance(&reps) / 100.0).sqrt();
        assert!((m - 1.0).abs() < 4.0 * se, "mean ratio {m} se {se}");
    }

    #[test]
    fn rank_correlation_cases() {
        assert_abs_diff_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0, epsilon = 1e-12);
    }
}
