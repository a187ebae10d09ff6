//! The independent Metropolis transition and chain runners.

use std::io::Write;
use std::ops::Range;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adaptation::{batch_update, AdamState, AdaptationConfig, AdaptationError, TraceRow};
use crate::linalg::Vector;
use crate::proposals::{analytic_expectation, FunctionSpec, Proposal, ProposalError};
use crate::rng::{RngStream, StreamRng};
use crate::targets::Target;

pub const MAX_INIT_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("NaN in acceptance ratio inputs")]
    NanInput,
    #[error("no proposal accepted after {0} initial draws")]
    InitializationTimeout(usize),
    #[error("chain length must be positive")]
    EmptyChain,
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
}

/// `min(1, exp{(f_y + log q_x) - (f_x + log q_y)})`, evaluated in log space.
///
/// Returns 1 when `exp{f(x)} q(y) = 0`.
pub fn acceptance_prob(log_f_x: f64, log_f_y: f64, log_q_x: f64, log_q_y: f64) -> Result<f64, KernelError> {
    if log_f_x.is_nan() || log_f_y.is_nan() || log_q_x.is_nan() || log_q_y.is_nan() {
        return Err(KernelError::NanInput);
    }
    let den = log_f_x + log_q_y;
    if den == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    let delta = (log_f_y + log_q_x) - den;
    if delta.is_nan() {
        return Err(KernelError::NanInput);
    }
    Ok(if delta >= 0.0 { 1.0 } else { delta.exp() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub x: Vector,
    pub y: Vector,
    pub alpha: f64,
    pub accepted: bool,
    pub log_f_x: f64,
    pub log_f_y: f64,
    pub log_q_x: f64,
    pub log_q_y: f64,
    /// Standard-normal draw behind `y` (Gaussian proposals).
    pub z: Option<Vector>,
    /// `∇ log π(y)` when the runner requested it.
    pub grad_y: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchInfo {
    pub proposal: Proposal,
    pub range: Range<usize>,
    /// `E_q[F]` for each tracked function, `None` without a closed form.
    pub expectations: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub stream: RngStream,
    pub target: String,
    pub burn_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub batches: Vec<BatchInfo>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().filter(|r| r.accepted).count() as f64 / n
    }

    pub fn mean_alpha(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().map(|r| r.alpha).sum::<f64>() / n
    }

    /// CSV dump with columns `step, accepted, alpha, x0..x{d-1}, y0..y{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.records.first().map_or(0, |r| r.x.len());
        let mut header = vec!["step".to_string(), "accepted".into(), "alpha".into()];
        header.extend((0..d).map(|k| format!("x{k}")));
        header.extend((0..d).map(|k| format!("y{k}")));
        out.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![i.to_string(), (r.accepted as u8).to_string(), format!("{:e}", r.alpha)];
            row.extend(r.x.iter().map(|v| format!("{v:e}")));
            row.extend(r.y.iter().map(|v| format!("{v:e}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A running IM chain: owns its state, the cached `f(x)`, and its stream.
pub struct ImChain<T: Target> {
    target: T,
    x: Vector,
    log_f_x: f64,
    rng: StreamRng,
    stream: RngStream,
}

impl<T: Target> ImChain<T> {
    /// Draws `X₀ ~ q`, then proposes further `q` draws against it until the
    /// first acceptance of a state with finite target density; that state
    /// starts the chain.
    pub fn initialize(target: T, q: &Proposal, stream: RngStream) -> Result<Self, KernelError> {
        let mut rng = stream.rng();
        let (mut x, _) = q.sample(&mut rng);
        let mut log_f_x = target.log_density(&x);
        for _ in 0..MAX_INIT_ATTEMPTS {
            let (y, _) = q.sample(&mut rng);
            let log_f_y = target.log_density(&y);
            let alpha = acceptance_prob(log_f_x, log_f_y, q.logpdf(&x)?, q.logpdf(&y)?)?;
            let u: f64 = rng.random();
            if u < alpha && log_f_y.is_finite() {
                return Ok(Self { target, x: y, log_f_x: log_f_y, rng, stream });
            }
            if !log_f_x.is_finite() && log_f_y.is_finite() {
                x = y;
                log_f_x = log_f_y;
            }
        }
        Err(KernelError::InitializationTimeout(MAX_INIT_ATTEMPTS))
    }

    pub fn state(&self) -> &Vector {
        &self.x
    }

    pub fn target(&self) -> &T {
        &self.target
    }

    /// One IM transition under `q`. The uniform is drawn even when `α = 1`
    /// so the stream position does not depend on the acceptance outcome.
    pub fn step(&mut self, q: &Proposal, want_grad: bool) -> Result<StepRecord, KernelError> {
        let (y, z) = q.sample(&mut self.rng);
        let (log_f_y, grad_y) = if want_grad {
            match self.target.log_density_and_grad(&y) {
                Some((f, g)) => (f, Some(g)),
                None if self.target.has_gradient() => (f64::NEG_INFINITY, None),
                None => return Err(AdaptationError::GradientUnavailable.into()),
            }
        } else {
            (self.target.log_density(&y), None)
        };
        let log_q_x = q.logpdf(&self.x)?;
        let log_q_y = q.logpdf(&y)?;
        let alpha = acceptance_prob(self.log_f_x, log_f_y, log_q_x, log_q_y)?;
        let u: f64 = self.rng.random();
        let accepted = u < alpha;
        let rec = StepRecord {
            x: self.x.clone(),
            y: y.clone(),
            alpha,
            accepted,
            log_f_x: self.log_f_x,
            log_f_y,
            log_q_x,
            log_q_y,
            z,
            grad_y,
        };
        if accepted {
            self.x = y;
            self.log_f_x = log_f_y;
        }
        Ok(rec)
    }

    pub fn run(&mut self, q: &Proposal, n: usize) -> Result<Vec<StepRecord>, KernelError> {
        (0..n).map(|_| self.step(q, false)).collect()
    }

    pub fn stream(&self) -> RngStream {
        self.stream
    }
}

fn expectations(q: &Proposal, fs: &[FunctionSpec]) -> Vec<Option<f64>> {
    fs.iter().map(|f| analytic_expectation(q, f).ok()).collect()
}

/// `n` post-burn-in records under a fixed proposal, as a single batch.
pub fn run_chain<T: Target>(
    target: T,
    q: &Proposal,
    n: usize,
    burn_in: usize,
    fs: &[FunctionSpec],
    stream: RngStream,
    label: &str,
) -> Result<Trajectory, KernelError> {
    if n == 0 {
        return Err(KernelError::EmptyChain);
    }
    let mut chain = ImChain::initialize(target, q, stream)?;
    chain.run(q, burn_in)?;
    let records = chain.run(q, n)?;
    Ok(Trajectory {
        batches: vec![BatchInfo { proposal: q.clone(), range: 0..n, expectations: expectations(q, fs) }],
        records,
        meta: TrajectoryMeta { stream, target: label.into(), burn_in },
    })
}

/// Output of the batched adaptive runner.
pub struct AdaptiveRun<T: Target> {
    pub trajectory: Trajectory,
    pub trace: Vec<TraceRow>,
    pub proposal: Proposal,
    pub chain: ImChain<T>,
}

/// Batch-adaptive IM: `burn_in_batches + ℓ` batches of `B` steps with a
/// gradient update of the Gaussian proposal after every batch but the last.
/// Only the final `ℓ` batches are recorded; the chain state carries over.
pub fn run_chain_batched<T: Target>(
    target: T,
    q0: &Proposal,
    cfg: &AdaptationConfig,
    fs: &[FunctionSpec],
    stream: RngStream,
    label: &str,
) -> Result<AdaptiveRun<T>, KernelError> {
    if cfg.batch_size == 0 || cfg.n_batches == 0 {
        return Err(KernelError::EmptyChain);
    }
    if !target.has_gradient() {
        return Err(AdaptationError::GradientUnavailable.into());
    }
    let mut chain = ImChain::initialize(target, q0, stream)?;
    let mut q = q0.clone();
    let mut adam = AdamState::new(q.dim(), &cfg.adam);
    let total = cfg.burn_in_batches + cfg.n_batches;
    let mut records = Vec::with_capacity(cfg.n_batches * cfg.batch_size);
    let mut batches = Vec::with_capacity(cfg.n_batches);
    let mut trace = Vec::with_capacity(total);
    for b in 0..total {
        let last = b + 1 == total;
        let batch: Vec<StepRecord> =
            (0..cfg.batch_size).map(|_| chain.step(&q, !last)).collect::<Result<_, _>>()?;
        let mean_alpha = batch.iter().map(|r| r.alpha).sum::<f64>() / batch.len() as f64;
        trace.push(TraceRow::new(b, &q, mean_alpha, cfg.track_kl));
        let next = if last { None } else { Some(batch_update(&q, &batch, cfg.gradient, &mut adam, b)?) };
        if b >= cfg.burn_in_batches {
            let start = records.len();
            records.extend(batch);
            batches.push(BatchInfo {
                proposal: q.clone(),
                range: start..records.len(),
                expectations: expectations(&q, fs),
            });
        }
        if let Some(nq) = next {
            q = nq;
        }
    }
    Ok(AdaptiveRun {
        trajectory: Trajectory {
            records,
            batches,
            meta: TrajectoryMeta { stream, target: label.into(), burn_in: cfg.burn_in_batches * cfg.batch_size },
        },
        trace,
        proposal: q,
        chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CholeskyFactor;
    use crate::proposals::GaussianProposal;
    use crate::targets::{GaussianTarget, StdGaussian};
    use approx::assert_abs_diff_eq;

    fn normal_q(var: f64) -> Proposal {
        Proposal::Gaussian(GaussianProposal::new(Vector::zeros(1), CholeskyFactor::scaled_identity(1, var).unwrap()).unwrap())
    }

    #[test]
    fn symmetric_terms_accept() {
        assert_eq!(acceptance_prob(-1.0, -1.0, -2.0, -2.0).unwrap(), 1.0);
    }

    #[test]
    fn one_dimensional_gaussian_ratio() {
        // π = N(0,1), q = N(0,4), x = 0, y = 1
        let q = normal_q(4.0);
        let (x, y) = (Vector::zeros(1), Vector::from_element(1, 1.0));
        let a = acceptance_prob(-0.0, -0.5, q.logpdf(&x).unwrap(), q.logpdf(&y).unwrap()).unwrap();
        assert_abs_diff_eq!(a, (-0.375f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn zero_density_branch() {
        assert_eq!(acceptance_prob(0.0, 0.0, 0.0, f64::NEG_INFINITY).unwrap(), 1.0);
        assert_eq!(acceptance_prob(f64::NEG_INFINITY, -3.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(acceptance_prob(0.0, f64::NEG_INFINITY, 0.0, 0.0).unwrap(), 0.0);
        assert!(acceptance_prob(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn matched_proposal_always_accepts() {
        let q = normal_q(1.0);
        let g = q.as_gaussian().unwrap();
        let t = GaussianTarget::new(g.mu.clone(), g.chol.clone()).unwrap();
        let tr = run_chain(t, &q, 1000, 0, &[], RngStream::new(1, 0), "gauss").unwrap();
        assert!(tr.records.iter().all(|r| r.alpha == 1.0 && r.accepted));
    }

    #[test]
    fn rerun_is_identical() {
        let q = normal_q(2.0);
        let a = run_chain(StdGaussian::new(1), &q, 500, 10, &[], RngStream::new(4, 2), "g").unwrap();
        let b = run_chain(StdGaussian::new(1), &q, 500, 10, &[], RngStream::new(4, 2), "g").unwrap();
        assert_eq!(a, b);
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with("step,accepted,alpha,x0,y0"));
    }

    #[test]
    fn transition_bookkeeping() {
        let q = normal_q(3.0);
        let tr = run_chain(StdGaussian::new(1), &q, 2000, 0, &[], RngStream::new(5, 0), "g").unwrap();
        for w in tr.records.windows(2) {
            if w[0].accepted {
                assert_eq!(w[1].x, w[0].y);
            } else {
                assert_eq!(w[1].x, w[0].x);
            }
        }
        for r in &tr.records {
            assert!((0.0..=1.0).contains(&r.alpha));
            let a = acceptance_prob(r.log_f_x, r.log_f_y, r.log_q_x, r.log_q_y).unwrap();
            assert!((a - r.alpha).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_chain_is_rejected() {
        assert!(run_chain(StdGaussian::new(1), &normal_q(1.0), 0, 0, &[], RngStream::new(0, 0), "g").is_err());
    }
}
