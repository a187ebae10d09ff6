//! Experiment recipes, replica fan-out, aggregation and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adaptation::{AdamConfig, AdaptationConfig, GradientKind, TraceRow};
use crate::bounds::{bound_1d_gaussian, bound_1d_student_t};
use crate::data::{load_gp, load_logistic, DataError};
use crate::estimators::{
    batch_expectations, est_batch, est_cim, est_cmc, est_im, est_imcv, est_imcv_coef, est_rb, sample_variance, vrf,
    EstimatorError, EstimatorKind, EstimatorReport, Evaluated,
};
use crate::kernel::{run_chain_batched, BatchInfo, ImChain, Trajectory, TrajectoryMeta};
use crate::linalg::{CholeskyFactor, Matrix, Vector};
use crate::modelselect::{gen_synthetic, run_model_scan, ModelRow, ScanConfig};
use crate::proposals::{analytic_expectation, FunctionSpec, GaussianProposal, Proposal, StudentTProposal};
use crate::rng::RngStream;
use crate::targets::{GaussianTarget, GpHyperPosterior, LogisticPosterior, StdGaussian, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OnedGauss,
    OnedT,
    GaussD,
    Modelselect,
    Logreg,
    Gp,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] =
        [Self::OnedGauss, Self::OnedT, Self::GaussD, Self::Modelselect, Self::Logreg, Self::Gp];

    pub fn name(self) -> &'static str {
        match self {
            Self::OnedGauss => "oned-gauss",
            Self::OnedT => "oned-t",
            Self::GaussD => "gauss-d",
            Self::Modelselect => "modelselect",
            Self::Logreg => "logreg",
            Self::Gp => "gp",
        }
    }

    /// Plain Monte Carlo for the one-dimensional and model-selection studies,
    /// the unmodified IM average for the adaptive ones.
    pub fn baseline(self) -> EstimatorKind {
        match self {
            Self::OnedGauss | Self::OnedT | Self::Modelselect => EstimatorKind::Cmc,
            _ => EstimatorKind::Im,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError(format!("unknown experiment '{s}'")))
    }
}

/// Whether estimates use a frozen proposal after adaptation, or the batches
/// collected while adaptation continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    After,
    During,
}

impl FromStr for Protocol {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "after" => Ok(Self::After),
            "during" => Ok(Self::During),
            _ => Err(ConfigError(format!("unknown protocol '{s}'"))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DataError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Dataset(_) => 3,
            Self::Numerical(_) | Self::Io(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub replicas: usize,
    /// Samples per replica under a fixed proposal; `ℓ·B` for `during`.
    pub n: usize,
    pub batch_size: usize,
    pub n_batches: usize,
    /// Adaptation updates before collection starts.
    pub burn_in_batches: usize,
    pub protocol: Protocol,
    pub sigma2: Vec<f64>,
    pub nu: Vec<f64>,
    pub d: usize,
    pub dataset: Option<PathBuf>,
    pub gradient: GradientKind,
    pub step_mu: f64,
    pub step_l: f64,
    pub step_decay: Option<f64>,
    pub prior_variance: f64,
    pub subsample: Option<usize>,
    /// Standardize logistic covariates before adding the intercept.
    pub standardize: bool,
    /// Adapt once and start every replica from the same proposal.
    pub shared_adaptation: bool,
    pub k: usize,
    pub l_mc: usize,
    pub em_samples: usize,
    pub data_seed: u64,
    pub bound_mc: usize,
    pub estimators: Vec<EstimatorKind>,
}

fn default_data(name: &str) -> PathBuf {
    Path::new("data").join(name)
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        use EstimatorKind::*;
        let adam = AdamConfig::default();
        let base = Self {
            kind,
            seed: 1,
            replicas: 50,
            n: 5000,
            batch_size: 50,
            n_batches: 100,
            burn_in_batches: 1000,
            protocol: Protocol::After,
            sigma2: vec![1.1, 1.5, 2.0, 3.0],
            nu: vec![5.0, 10.0, 20.0, 50.0],
            d: 10,
            dataset: None,
            gradient: GradientKind::Dsvi,
            step_mu: adam.step_mu,
            step_l: adam.step_l,
            step_decay: adam.decay,
            prior_variance: 1.0,
            subsample: None,
            standardize: false,
            shared_adaptation: false,
            k: 4,
            l_mc: 100,
            em_samples: 1000,
            data_seed: 2024,
            bound_mc: 1_000_000,
            estimators: vec![Im, Imcv, ImcvCoef, Rb, CimCoef],
        };
        match kind {
            ExperimentKind::OnedGauss | ExperimentKind::OnedT => Self {
                replicas: 20,
                burn_in_batches: 0,
                estimators: vec![Cmc, Im, Imcv, Rb],
                ..base
            },
            ExperimentKind::GaussD => Self { step_mu: 0.05, step_l: 0.05, step_decay: Some(10.0), ..base },
            ExperimentKind::Modelselect => Self {
                replicas: 100,
                n: 1000,
                burn_in_batches: 0,
                estimators: vec![Cmc, Imcv],
                ..base
            },
            ExperimentKind::Logreg => Self {
                dataset: Some(default_data("ripley.csv")),
                gradient: GradientKind::Stl,
                step_mu: 0.03,
                step_l: 0.03,
                ..base
            },
            ExperimentKind::Gp => Self {
                dataset: Some(default_data("boston.csv")),
                gradient: GradientKind::Stl,
                prior_variance: 10.0,
                n: 1000,
                n_batches: 20,
                burn_in_batches: 500,
                subsample: Some(150),
                shared_adaptation: true,
                ..base
            },
        }
    }

    pub fn adaptation(&self) -> AdaptationConfig {
        AdaptationConfig {
            batch_size: self.batch_size,
            n_batches: self.n_batches,
            burn_in_batches: self.burn_in_batches,
            gradient: self.gradient,
            adam: AdamConfig { step_mu: self.step_mu, step_l: self.step_l, decay: self.step_decay, ..AdamConfig::default() },
            track_kl: self.kind == ExperimentKind::GaussD,
        }
    }

    /// Sets one `key = value` entry.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError(format!("{key}: cannot parse '{v}'")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        match key {
            "experiment" => self.kind = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "replicas" => self.replicas = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "batch_size" | "B" => self.batch_size = num(key, value)?,
            "n_batches" | "l" | "ell" => self.n_batches = num(key, value)?,
            "burn_in_batches" | "burn_in" => self.burn_in_batches = num(key, value)?,
            "protocol" => self.protocol = value.parse()?,
            "sigma2" => self.sigma2 = list(key, value)?,
            "nu" => self.nu = list(key, value)?,
            "d" => self.d = num(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "gradient" => self.gradient = value.parse().map_err(|e: String| ConfigError(e))?,
            "step_mu" => self.step_mu = num(key, value)?,
            "step_l" => self.step_l = num(key, value)?,
            "step_decay" => {
                self.step_decay = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "prior_variance" => self.prior_variance = num(key, value)?,
            "subsample" => {
                self.subsample = match value {
                    "none" | "0" => None,
                    v => Some(num(key, v)?),
                }
            }
            "standardize" => self.standardize = num(key, value)?,
            "shared_adaptation" => self.shared_adaptation = num(key, value)?,
            "k" | "K" => self.k = num(key, value)?,
            "l_mc" => self.l_mc = num(key, value)?,
            "em_samples" => self.em_samples = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "bound_mc" => self.bound_mc = num(key, value)?,
            "estimators" => {
                self.estimators = value
                    .split(',')
                    .map(|s| s.trim().parse::<EstimatorKind>().map_err(ConfigError))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(ConfigError(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&mut self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.into()));
        if self.replicas < 2 {
            return bad("replicas must be at least 2 for variance ratios");
        }
        if self.batch_size == 0 || self.n_batches == 0 {
            return bad("batch_size and n_batches must be positive");
        }
        if self.protocol == Protocol::During {
            self.n = self.batch_size * self.n_batches;
        }
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.d == 0 {
            return bad("d must be positive");
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return bad("sigma2 values must be positive");
        }
        if self.nu.iter().any(|&v| !(v > 2.0)) {
            return bad("nu values must exceed 2");
        }
        if !(self.prior_variance > 0.0) || !(self.step_mu >= 0.0) || !(self.step_l >= 0.0) {
            return bad("prior variance and step sizes must be positive");
        }
        if self.kind == ExperimentKind::Modelselect && (self.k == 0 || self.l_mc == 0 || self.em_samples == 0) {
            return bad("k, l_mc and em_samples must be positive");
        }
        if !self.estimators.contains(&self.kind.baseline()) {
            self.estimators.insert(0, self.kind.baseline());
        }
        Ok(())
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub setting: String,
    pub estimator: String,
    pub function: String,
    pub baseline: String,
    pub replicas: usize,
    pub mean: f64,
    pub variance: f64,
    pub vrf: f64,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaEstimate {
    pub function: String,
    pub estimator: EstimatorKind,
    pub value: f64,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaRow {
    pub experiment: String,
    pub setting: String,
    pub replica: usize,
    pub seed: u64,
    pub stream: u64,
    pub acceptance_rate: f64,
    pub estimates: Vec<ReplicaEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceLine {
    pub setting: String,
    pub replica: usize,
    pub batch: usize,
    pub kl: Option<f64>,
    pub mean_alpha: f64,
    pub mu_norm: f64,
    pub log_det_l: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRow>,
    pub replicas: Vec<ReplicaRow>,
    pub trace: Vec<TraceLine>,
    pub model_table: Option<Vec<ModelRow>>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn find(&self, setting: &str, estimator: &str, function: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.setting == setting && r.estimator == estimator && r.function == function)
    }
}

/// `T` independent jobs on streams `0..T` of `seed`, collected in stream order.
pub fn replica_fanout<R, F>(seed: u64, replicas: usize, job: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, RngStream) -> R + Sync,
{
    (0..replicas).into_par_iter().map(|t| job(t, RngStream::new(seed, t as u64))).collect()
}

/// A function with its report label.
#[derive(Clone, Debug)]
pub struct Tracked {
    pub label: String,
    pub f: FunctionSpec,
}

impl Tracked {
    fn new(f: FunctionSpec) -> Self {
        Self { label: f.label(), f }
    }
}

#[derive(Debug, Clone)]
struct ReplicaOut {
    acceptance_rate: f64,
    estimates: Vec<ReplicaEstimate>,
    trace: Vec<TraceRow>,
}

fn push(out: &mut Vec<ReplicaEstimate>, label: &str, r: Result<EstimatorReport, EstimatorError>) {
    match r {
        Ok(r) => out.push(ReplicaEstimate { function: label.into(), estimator: r.kind, value: r.value, c1: r.c1, c2: r.c2 }),
        Err(e) => log::debug!("{label}: {e}"),
    }
}

/// Every requested trajectory-based estimator for every tracked function.
/// The single-proposal estimators need one batch with a known `E_q[F]`.
pub fn trajectory_estimates(traj: &Trajectory, fs: &[Tracked], kinds: &[EstimatorKind]) -> Vec<ReplicaEstimate> {
    let mut out = Vec::new();
    for (j, t) in fs.iter().enumerate() {
        let ev = Evaluated::from_trajectory(traj, |x| t.f.eval(x));
        let single = match traj.batches.as_slice() {
            [b] => b.expectations.get(j).copied().flatten(),
            _ => None,
        };
        let batches = batch_expectations(traj, j);
        for &k in kinds {
            use EstimatorKind::*;
            let r = match (k, single) {
                (Im, _) => est_im(&ev),
                (Rb, _) => est_rb(&ev),
                (Imcv, Some(eq)) => est_imcv(&ev, eq),
                (ImcvCoef, Some(eq)) => est_imcv_coef(&ev, eq),
                (Cim, Some(eq)) => est_cim(&ev, eq, false),
                (CimCoef, Some(eq)) => est_cim(&ev, eq, true),
                (Batch, _) => est_batch(&ev, &batches, false),
                (BatchCoef, _) => est_batch(&ev, &batches, true),
                _ => continue,
            };
            push(&mut out, &t.label, r);
        }
    }
    out
}

fn aggregate(
    experiment: &str,
    setting: &str,
    baseline: EstimatorKind,
    fs: &[Tracked],
    kinds: &[EstimatorKind],
    reps: &[&ReplicaOut],
) -> Vec<SummaryRow> {
    let acc = reps.iter().map(|r| r.acceptance_rate).sum::<f64>() / reps.len() as f64;
    let collect = |f: &str, k: EstimatorKind| -> Vec<&ReplicaEstimate> {
        reps.iter().filter_map(|r| r.estimates.iter().find(|e| e.function == f && e.estimator == k)).collect()
    };
    let mean_opt = |xs: Vec<Option<f64>>| -> Option<f64> {
        let v: Vec<f64> = xs.into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut rows = Vec::new();
    for t in fs {
        let base: Vec<f64> = collect(&t.label, baseline).iter().map(|e| e.value).collect();
        for &k in kinds {
            let es = collect(&t.label, k);
            if es.is_empty() {
                continue;
            }
            let vals: Vec<f64> = es.iter().map(|e| e.value).collect();
            let ratio = if base.len() == vals.len() {
                match vrf(&base, &vals) {
                    Ok(v) => v,
                    Err(EstimatorError::ZeroDenominator) => f64::INFINITY,
                    Err(_) => f64::NAN,
                }
            } else {
                f64::NAN
            };
            rows.push(SummaryRow {
                experiment: experiment.into(),
                setting: setting.into(),
                estimator: k.name().into(),
                function: t.label.clone(),
                baseline: baseline.name().into(),
                replicas: vals.len(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                variance: if vals.len() > 1 { sample_variance(&vals) } else { f64::NAN },
                vrf: ratio,
                c1: mean_opt(es.iter().map(|e| e.c1).collect()),
                c2: mean_opt(es.iter().map(|e| e.c2).collect()),
                acceptance_rate: if k == EstimatorKind::Cmc { f64::NAN } else { acc },
            });
        }
    }
    rows
}

/// Runs one setting's replicas, records them and appends the aggregate rows.
fn finish_setting(
    report: &mut ExperimentReport,
    cfg: &ExperimentConfig,
    setting: &str,
    fs: &[Tracked],
    results: Vec<Result<ReplicaOut, String>>,
) -> Result<(), ExperimentError> {
    let exp = cfg.kind.name();
    for (t, r) in results.iter().enumerate() {
        let (acceptance_rate, estimates, error) = match r {
            Ok(o) => (o.acceptance_rate, o.estimates.clone(), None),
            Err(e) => (f64::NAN, vec![], Some(e.clone())),
        };
        report.replicas.push(ReplicaRow {
            experiment: exp.into(),
            setting: setting.into(),
            replica: t,
            seed: cfg.seed,
            stream: t as u64,
            acceptance_rate,
            estimates,
            error,
        });
        if let Ok(o) = r {
            report.trace.extend(o.trace.iter().map(|row| TraceLine {
                setting: setting.into(),
                replica: t,
                batch: row.batch,
                kl: row.kl,
                mean_alpha: row.mean_alpha,
                mu_norm: row.mu_norm,
                log_det_l: row.log_det_l,
            }));
        }
    }
    let ok: Vec<&ReplicaOut> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.len() < 2 {
        let first = results.iter().find_map(|r| r.as_ref().err()).cloned().unwrap_or_default();
        return Err(ExperimentError::Numerical(format!("{exp} {setting}: fewer than 2 replicas survived ({first})")));
    }
    if ok.len() < results.len() {
        report.notes.push(format!("{setting}: {} of {} replicas failed", results.len() - ok.len(), results.len()));
    }
    report.summary.extend(aggregate(exp, setting, cfg.kind.baseline(), fs, &cfg.estimators, &ok));
    Ok(())
}

fn fixed_trajectory<T: Target>(
    chain: &mut ImChain<T>,
    q: &Proposal,
    n: usize,
    fs: &[Tracked],
    stream: RngStream,
    label: &str,
) -> Result<Trajectory, String> {
    let records = chain.run(q, n).map_err(|e| e.to_string())?;
    let expectations = fs.iter().map(|t| analytic_expectation(q, &t.f).ok()).collect();
    Ok(Trajectory {
        records,
        batches: vec![BatchInfo { proposal: q.clone(), range: 0..n, expectations }],
        meta: TrajectoryMeta { stream, target: label.into(), burn_in: 0 },
    })
}

fn one_dim_replica(
    cfg: &ExperimentConfig,
    q: &Proposal,
    fs: &[Tracked],
    stream: RngStream,
) -> Result<ReplicaOut, String> {
    // normalized, so that q = π gives α = 1 exactly
    let target = GaussianTarget::new(Vector::zeros(1), CholeskyFactor::identity(1)).map_err(|e| e.to_string())?;
    let mut chain = ImChain::initialize(target, q, stream).map_err(|e| e.to_string())?;
    let traj = fixed_trajectory(&mut chain, q, cfg.n, fs, stream, "N(0,1)")?;
    let mut estimates = trajectory_estimates(&traj, fs, &cfg.estimators);
    if cfg.estimators.contains(&EstimatorKind::Cmc) {
        let mut rng = stream.child(7).rng();
        let draws: Vec<f64> = (0..cfg.n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for t in fs {
            let vals: Vec<f64> = draws.iter().map(|&x| t.f.eval(&Vector::from_element(1, x))).collect();
            push(&mut estimates, &t.label, est_cmc(&vals));
        }
    }
    Ok(ReplicaOut { acceptance_rate: traj.acceptance_rate(), estimates, trace: vec![] })
}

fn run_one_dim(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let fs = vec![Tracked::new(FunctionSpec::Coordinate(0))];
    let mut report = ExperimentReport::default();
    let settings: Vec<(String, Proposal)> = match cfg.kind {
        ExperimentKind::OnedGauss => cfg
            .sigma2
            .iter()
            .map(|&s2| {
                let chol = CholeskyFactor::scaled_identity(1, s2).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
                let q = GaussianProposal::new(Vector::zeros(1), chol).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
                Ok((format!("sigma2={s2}"), Proposal::Gaussian(q)))
            })
            .collect::<Result<_, ExperimentError>>()?,
        _ => cfg.nu.iter().map(|&nu| (format!("nu={nu}"), Proposal::StudentT(StudentTProposal { nu }))).collect(),
    };
    for (j, (setting, q)) in settings.iter().enumerate() {
        let results = replica_fanout(cfg.seed, cfg.replicas, |_, s| one_dim_replica(cfg, q, &fs, s.child(j as u64)));
        finish_setting(&mut report, cfg, setting, &fs, results)?;
        let bound = match (cfg.kind, q) {
            (ExperimentKind::OnedGauss, Proposal::Gaussian(g)) => {
                let s2 = g.covariance()[(0, 0)];
                bound_1d_gaussian(s2, 1e-12).map_err(|e| ExperimentError::Numerical(e.to_string()))?
            }
            (_, Proposal::StudentT(t)) => {
                let mut rng = RngStream::new(cfg.seed, u64::MAX).child(j as u64).rng();
                bound_1d_student_t(t.nu, cfg.bound_mc, &mut rng).map_err(|e| ExperimentError::Numerical(e.to_string()))?
            }
            _ => unreachable!("one-dimensional settings use Gaussian or Student-t proposals"),
        };
        report.summary.push(SummaryRow {
            experiment: cfg.kind.name().into(),
            setting: setting.clone(),
            estimator: "bound".into(),
            function: fs[0].label.clone(),
            baseline: EstimatorKind::Cmc.name().into(),
            replicas: 0,
            mean: bound.bound,
            variance: bound.se * bound.se,
            vrf: 1.0 / bound.bound,
            c1: None,
            c2: None,
            acceptance_rate: f64::NAN,
        });
    }
    Ok(report)
}

/// Adapts `q0` for `burn_in_batches` updates. Returns the final proposal, the
/// chain positioned after the last adaptation batch, and the trace.
fn adapt<T: Target>(
    target: T,
    q0: &Proposal,
    cfg: &ExperimentConfig,
    stream: RngStream,
) -> Result<(Proposal, ImChain<T>, Vec<TraceRow>), String> {
    let mut a = cfg.adaptation();
    // burn_in_batches updates are followed by one unrecorded batch under the final proposal
    a.n_batches = 1;
    let run = run_chain_batched(target, q0, &a, &[], stream, cfg.kind.name()).map_err(|e| e.to_string())?;
    Ok((run.proposal, run.chain, run.trace))
}

fn adaptive_replica<T: Target>(
    target: T,
    q0: &Proposal,
    cfg: &ExperimentConfig,
    fs: &[Tracked],
    shared: Option<&Proposal>,
    stream: RngStream,
) -> Result<ReplicaOut, String> {
    let specs: Vec<FunctionSpec> = fs.iter().map(|t| t.f.clone()).collect();
    match (cfg.protocol, shared) {
        (Protocol::During, _) => {
            let run = run_chain_batched(target, q0, &cfg.adaptation(), &specs, stream, cfg.kind.name())
                .map_err(|e| e.to_string())?;
            Ok(ReplicaOut {
                acceptance_rate: run.trajectory.acceptance_rate(),
                estimates: trajectory_estimates(&run.trajectory, fs, &cfg.estimators),
                trace: run.trace,
            })
        }
        (Protocol::After, Some(q)) => {
            let mut chain = ImChain::initialize(target, q, stream).map_err(|e| e.to_string())?;
            let traj = fixed_trajectory(&mut chain, q, cfg.n, fs, stream, cfg.kind.name())?;
            Ok(ReplicaOut {
                acceptance_rate: traj.acceptance_rate(),
                estimates: trajectory_estimates(&traj, fs, &cfg.estimators),
                trace: vec![],
            })
        }
        (Protocol::After, None) => {
            let (q, mut chain, trace) = adapt(target, q0, cfg, stream)?;
            let traj = fixed_trajectory(&mut chain, &q, cfg.n, fs, stream, cfg.kind.name())?;
            Ok(ReplicaOut {
                acceptance_rate: traj.acceptance_rate(),
                estimates: trajectory_estimates(&traj, fs, &cfg.estimators),
                trace,
            })
        }
    }
}

fn run_adaptive<T: Target + Sync>(
    cfg: &ExperimentConfig,
    target: &T,
    q0: &Proposal,
    fs: &[Tracked],
    setting: &str,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::default();
    let shared = if cfg.shared_adaptation && cfg.protocol == Protocol::After {
        let (q, _, trace) = adapt(target, q0, cfg, RngStream::new(cfg.seed, u64::MAX))
            .map_err(ExperimentError::Numerical)?;
        report.trace.extend(trace.iter().map(|row| TraceLine {
            setting: format!("{setting}/shared"),
            replica: 0,
            batch: row.batch,
            kl: row.kl,
            mean_alpha: row.mean_alpha,
            mu_norm: row.mu_norm,
            log_det_l: row.log_det_l,
        }));
        report.notes.push("one adaptation run shared by all replicas".into());
        Some(q)
    } else {
        None
    };
    let results = replica_fanout(cfg.seed, cfg.replicas, |_, s| adaptive_replica(target, q0, cfg, fs, shared.as_ref(), s));
    finish_setting(&mut report, cfg, setting, fs, results)?;
    Ok(report)
}

fn lower_ones(d: usize) -> Result<CholeskyFactor, ExperimentError> {
    CholeskyFactor::from_lower(Matrix::from_fn(d, d, |i, j| if i >= j { 1.0 } else { 0.0 }))
        .map_err(|e| ExperimentError::Numerical(e.to_string()))
}

fn gaussian_q(mu: Vector, chol: CholeskyFactor) -> Result<Proposal, ExperimentError> {
    Ok(Proposal::Gaussian(GaussianProposal::new(mu, chol).map_err(|e| ExperimentError::Numerical(e.to_string()))?))
}

fn run_gauss_d(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let d = cfg.d;
    let q0 = gaussian_q(Vector::from_element(d, 1.0), lower_ones(d)?)?;
    let fs: Vec<Tracked> = (0..d).map(|k| Tracked::new(FunctionSpec::Coordinate(k))).collect();
    run_adaptive(cfg, &StdGaussian::new(d), &q0, &fs, &format!("d={d}"))
}

fn dataset_path(cfg: &ExperimentConfig) -> Result<&Path, ExperimentError> {
    cfg.dataset.as_deref().ok_or_else(|| ConfigError("dataset path required".into()).into())
}

fn setting_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string()
}

fn run_logreg(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let path = dataset_path(cfg)?;
    let data = load_logistic(path, cfg.standardize)?;
    let d = data.x.ncols();
    let xbar = Vector::from_iterator(d, data.x.column_iter().map(|c| c.mean()));
    let mut fs: Vec<Tracked> = (0..d).map(|k| Tracked::new(FunctionSpec::Coordinate(k))).collect();
    fs.extend((0..d).map(|k| Tracked::new(FunctionSpec::CoordinateSquare(k))));
    fs.push(Tracked { label: "odds".into(), f: FunctionSpec::ExpLinear(xbar) });
    let target = LogisticPosterior::new(data, cfg.prior_variance);
    let q0 = gaussian_q(Vector::zeros(d), CholeskyFactor::identity(d))?;
    run_adaptive(cfg, &target, &q0, &fs, &setting_name(path))
}

pub const GP_PARAMS: [&str; 3] = ["log_sigma2", "log_sigma_f2", "log_ell2"];

fn run_gp(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let path = dataset_path(cfg)?;
    let data = load_gp(path, cfg.subsample.map(|m| (m, RngStream::new(cfg.data_seed, 0))))?;
    let n_rows = data.x.nrows();
    let target = GpHyperPosterior::new(&data, cfg.prior_variance);
    let mut fs: Vec<Tracked> =
        (0..3).map(|k| Tracked { label: GP_PARAMS[k].into(), f: FunctionSpec::Coordinate(k) }).collect();
    fs.extend((0..3).map(|k| Tracked {
        label: GP_PARAMS[k].trim_start_matches("log_").into(),
        f: FunctionSpec::exp_coordinate(3, k),
    }));
    let q0 = gaussian_q(Vector::zeros(3), CholeskyFactor::identity(3))?;
    let mut report = run_adaptive(cfg, &target, &q0, &fs, &setting_name(path))?;
    report.notes.push(format!("GP data rows used: {n_rows}"));
    Ok(report)
}

fn run_modelselect(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let problem = gen_synthetic(&mut RngStream::new(cfg.data_seed, 0).rng());
    let scan = ScanConfig {
        k: cfg.k,
        n: cfg.n,
        replicas: cfg.replicas,
        l_mc: cfg.l_mc,
        em_samples: cfg.em_samples,
        seed: cfg.seed,
    };
    let rows = run_model_scan(&problem, &scan).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    let mut report = ExperimentReport::default();
    let exp = cfg.kind.name();
    for row in &rows {
        if let Some(e) = &row.error {
            report.notes.push(format!("{}: {e}", row.model));
            continue;
        }
        for (kind, reps, value) in
            [(EstimatorKind::Cmc, &row.cmc, row.neg_log10_cmc), (EstimatorKind::Imcv, &row.imcv, row.neg_log10_imcv)]
        {
            let ratios: Vec<f64> = reps.iter().map(|e| e.ratio).collect();
            report.summary.push(SummaryRow {
                experiment: exp.into(),
                setting: row.model.clone(),
                estimator: kind.name().into(),
                function: "neg_log10_marginal".into(),
                baseline: EstimatorKind::Cmc.name().into(),
                replicas: reps.len(),
                mean: value,
                variance: sample_variance(&ratios),
                vrf: if kind == EstimatorKind::Cmc { 1.0 } else { row.vrf },
                c1: None,
                c2: None,
                acceptance_rate: if kind == EstimatorKind::Cmc { f64::NAN } else { row.acceptance_rate },
            });
            for (t, e) in reps.iter().enumerate() {
                report.replicas.push(ReplicaRow {
                    experiment: exp.into(),
                    setting: row.model.clone(),
                    replica: t,
                    seed: cfg.seed,
                    stream: t as u64,
                    acceptance_rate: e.acceptance_rate,
                    estimates: vec![ReplicaEstimate {
                        function: "neg_log10_marginal".into(),
                        estimator: kind,
                        value: e.neg_log10(),
                        c1: None,
                        c2: None,
                    }],
                    error: None,
                });
            }
        }
        report.summary.push(SummaryRow {
            experiment: exp.into(),
            setting: row.model.clone(),
            estimator: "oracle".into(),
            function: "neg_log10_marginal".into(),
            baseline: EstimatorKind::Cmc.name().into(),
            replicas: 0,
            mean: row.oracle,
            variance: 0.0,
            vrf: f64::NAN,
            c1: None,
            c2: None,
            acceptance_rate: f64::NAN,
        });
    }
    report.model_table = Some(rows);
    Ok(report)
}

/// Runs a validated configuration on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::OnedGauss | ExperimentKind::OnedT => run_one_dim(&cfg),
        ExperimentKind::GaussD => run_gauss_d(&cfg),
        ExperimentKind::Modelselect => run_modelselect(&cfg),
        ExperimentKind::Logreg => run_logreg(&cfg),
        ExperimentKind::Gp => run_gp(&cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub proposal: String,
    pub parameter: f64,
    pub bound: f64,
    pub se: f64,
    pub log10_vrf_lower: f64,
}

/// Gaussian bounds over `sigma2` by quadrature, Student-t bounds over `nu` by
/// Monte Carlo with `bound_mc` draws.
pub fn run_bounds(cfg: &ExperimentConfig) -> Result<Vec<BoundRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &s2 in &cfg.sigma2 {
        let b = bound_1d_gaussian(s2, 1e-12).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
        rows.push(BoundRow { proposal: "normal".into(), parameter: s2, bound: b.bound, se: b.se, log10_vrf_lower: b.log10_vrf_lower() });
    }
    for (j, &nu) in cfg.nu.iter().enumerate() {
        let mut rng = RngStream::new(cfg.seed, u64::MAX).child(j as u64).rng();
        let b = bound_1d_student_t(nu, cfg.bound_mc, &mut rng).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
        rows.push(BoundRow { proposal: "student-t".into(), parameter: nu, bound: b.bound, se: b.se, log10_vrf_lower: b.log10_vrf_lower() });
    }
    Ok(rows)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ModelTableRow<'a> {
    model: &'a str,
    neg_log10_imcv: f64,
    neg_log10_cmc: f64,
    oracle: f64,
    vrf: f64,
}

/// `summary.csv`, `replicas.jsonl`, and when present `trace.csv` and
/// `modelselect.csv`. Returns the paths written.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let p = dir.join("summary.csv");
    write_csv(&p, &report.summary)?;
    written.push(p);
    let p = dir.join("replicas.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&p)?);
    for r in &report.replicas {
        serde_json::to_writer(&mut f, r).map_err(|e| ExperimentError::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    written.push(p);
    if !report.trace.is_empty() {
        let p = dir.join("trace.csv");
        write_csv(&p, &report.trace)?;
        written.push(p);
    }
    if let Some(rows) = &report.model_table {
        let p = dir.join("modelselect.csv");
        let table: Vec<ModelTableRow> = rows
            .iter()
            .map(|r| ModelTableRow {
                model: &r.model,
                neg_log10_imcv: r.neg_log10_imcv,
                neg_log10_cmc: r.neg_log10_cmc,
                oracle: r.oracle,
                vrf: r.vrf,
            })
            .collect();
        write_csv(&p, &table)?;
        written.push(p);
    }
    Ok(written)
}

pub fn write_bounds(rows: &[BoundRow], dir: &Path) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir)?;
    let p = dir.join("bounds.csv");
    write_csv(&p, rows)?;
    Ok(p)
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Plain-text table of the summary, one block per setting.
pub fn format_summary(report: &ExperimentReport) -> String {
    let mut by_setting: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &report.summary {
        if !by_setting.contains_key(r.setting.as_str()) {
            order.push(r.setting.as_str());
        }
        by_setting.entry(&r.setting).or_default().push(r);
    }
    let mut s = String::new();
    for setting in order {
        let rows = &by_setting[setting];
        s += &format!("[{setting}]\n");
        s += &format!("{:<20} {:<12} {:>14} {:>12} {:>12} {:>8}\n", "function", "estimator", "mean", "variance", "vrf", "accept");
        for r in rows {
            s += &format!(
                "{:<20} {:<12} {:>14} {:>12} {:>12} {:>8}\n",
                r.function,
                r.estimator,
                fmt_num(r.mean),
                fmt_num(r.variance),
                fmt_num(r.vrf),
                fmt_num(r.acceptance_rate)
            );
        }
    }
    for n in &report.notes {
        s += &format!("note: {n}\n");
    }
    s
}
