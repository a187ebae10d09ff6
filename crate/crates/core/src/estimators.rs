//! Estimators of `E_π[F]` from an IM trajectory, and their coefficients.

use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::Trajectory;
use crate::linalg::Vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("degenerate denominator in coefficient fit")]
    DegenerateDenominator,
    #[error("estimator needs at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("batch {0} has no E_q[F] for this function")]
    MissingExpectation(usize),
    #[error("zero denominator in variance ratio")]
    ZeroDenominator,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum EstimatorKind {
    #[serde(rename = "IM")]
    Im,
    #[serde(rename = "IMCV")]
    Imcv,
    #[serde(rename = "IMCV-approx")]
    ImcvApprox,
    #[serde(rename = "IMCV-coef")]
    ImcvCoef,
    #[serde(rename = "RB")]
    Rb,
    #[serde(rename = "CIM")]
    Cim,
    #[serde(rename = "CIM-coef")]
    CimCoef,
    #[serde(rename = "BATCH")]
    Batch,
    #[serde(rename = "BATCH-coef")]
    BatchCoef,
    #[serde(rename = "CMC")]
    Cmc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 10] = [
        Self::Im,
        Self::Imcv,
        Self::ImcvApprox,
        Self::ImcvCoef,
        Self::Rb,
        Self::Cim,
        Self::CimCoef,
        Self::Batch,
        Self::BatchCoef,
        Self::Cmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Im => "IM",
            Self::Imcv => "IMCV",
            Self::ImcvApprox => "IMCV-approx",
            Self::ImcvCoef => "IMCV-coef",
            Self::Rb => "RB",
            Self::Cim => "CIM",
            Self::CimCoef => "CIM-coef",
            Self::Batch => "BATCH",
            Self::BatchCoef => "BATCH-coef",
            Self::Cmc => "CMC",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown estimator '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub kind: EstimatorKind,
    pub value: f64,
    /// `ĉ₁`, or `ĉ` for the coupled estimator; batch variants report means.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub n_used: usize,
}

impl EstimatorReport {
    fn plain(kind: EstimatorKind, value: f64, n_used: usize) -> Self {
        Self { kind, value, c1: None, c2: None, n_used }
    }
}

/// `F(Xᵢ)`, `F(Yᵢ)` and `αᵢ` for one function along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Evaluated {
    pub fn new(fx: Vec<f64>, fy: Vec<f64>, alpha: Vec<f64>) -> Result<Self, EstimatorError> {
        if fx.len() != fy.len() || fx.len() != alpha.len() {
            return Err(EstimatorError::LengthMismatch(fx.len(), fy.len().min(alpha.len())));
        }
        Ok(Self { fx, fy, alpha })
    }

    pub fn from_trajectory(traj: &Trajectory, f: impl Fn(&Vector) -> f64) -> Self {
        let mut fx = Vec::with_capacity(traj.len());
        let mut fy = Vec::with_capacity(traj.len());
        let mut alpha = Vec::with_capacity(traj.len());
        for r in &traj.records {
            fx.push(f(&r.x));
            fy.push(f(&r.y));
            alpha.push(r.alpha);
        }
        Self { fx, fy, alpha }
    }

    pub fn len(&self) -> usize {
        self.fx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fx.is_empty()
    }

    fn slice(&self, r: Range<usize>) -> Evaluated {
        Evaluated { fx: self.fx[r.clone()].to_vec(), fy: self.fy[r.clone()].to_vec(), alpha: self.alpha[r].to_vec() }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

fn nonempty(ev: &Evaluated, needed: usize) -> Result<(), EstimatorError> {
    if ev.len() < needed {
        Err(EstimatorError::TooFewRecords { needed, got: ev.len() })
    } else {
        Ok(())
    }
}

/// `(1/n) Σ F(Xᵢ)`.
pub fn est_im(ev: &Evaluated) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 1)?;
    Ok(EstimatorReport::plain(EstimatorKind::Im, mean(ev.fx.iter().copied()), ev.len()))
}

/// `(1/n) Σ {F(Xᵢ) + αᵢ (F(Yᵢ) - F(Xᵢ))}`.
pub fn est_rb(ev: &Evaluated) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 1)?;
    let v = mean((0..ev.len()).map(|i| ev.fx[i] + ev.alpha[i] * (ev.fy[i] - ev.fx[i])));
    Ok(EstimatorReport::plain(EstimatorKind::Rb, v, ev.len()))
}

/// `EqG + (1/n) Σ {(F(Xᵢ) - G(Yᵢ)) + αᵢ (F(Yᵢ) - F(Xᵢ))}`, algebraically the
/// control-variate average. Arranged so that `α ≡ 1`, `G = F` cancels exactly.
fn cv_value(ev: &Evaluated, gy: &[f64], eq_g: f64) -> f64 {
    eq_g + mean((0..ev.len()).map(|i| (ev.fx[i] - gy[i]) + ev.alpha[i] * (ev.fy[i] - ev.fx[i])))
}

/// `(1/n) Σ {F(Xᵢ) + αᵢ (F(Yᵢ) - F(Xᵢ)) - (F(Yᵢ) - E_q[F])}`.
pub fn est_imcv(ev: &Evaluated, eq_f: f64) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 1)?;
    Ok(EstimatorReport::plain(EstimatorKind::Imcv, cv_value(ev, &ev.fy, eq_f), ev.len()))
}

/// IMCV with the control variate built from a surrogate `F̃` whose
/// expectation under `q` is known.
pub fn est_imcv_approx(ev: &Evaluated, ftilde_y: &[f64], eq_ftilde: f64) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 1)?;
    if ftilde_y.len() != ev.len() {
        return Err(EstimatorError::LengthMismatch(ev.len(), ftilde_y.len()));
    }
    Ok(EstimatorReport::plain(EstimatorKind::ImcvApprox, cv_value(ev, ftilde_y, eq_ftilde), ev.len()))
}

fn check_den(den: f64) -> Result<(), EstimatorError> {
    if den > 0.0 && den.is_finite() {
        Ok(())
    } else {
        Err(EstimatorError::DegenerateDenominator)
    }
}

/// `ĉ₂ = Σ αᵢ(F(Yᵢ) - F(Xᵢ))(G(Yᵢ) - EqG) / Σ (G(Yᵢ) - EqG)²`.
pub fn fit_c2_with(ev: &Evaluated, gy: &[f64], eq_g: f64) -> Result<f64, EstimatorError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &g) in gy.iter().enumerate().take(ev.len()) {
        let c = g - eq_g;
        num += ev.alpha[i] * (ev.fy[i] - ev.fx[i]) * c;
        den += c * c;
    }
    check_den(den)?;
    Ok(num / den)
}

pub fn fit_c2(ev: &Evaluated, eq_f: f64) -> Result<f64, EstimatorError> {
    fit_c2_with(ev, &ev.fy, eq_f)
}

/// The `ĉ₁`-type ratio for a sequence `F(Xᵢ)` and its one-step predictions `PFᵢ`:
/// `[Σ F(Xᵢ)(F(Xᵢ) + PFᵢ) - n⁻¹ Σ F(Xᵢ) Σ (F(Xᵢ) + PFᵢ)] / Σ_{i≥2} (F(Xᵢ) - PF_{i-1})²`.
pub fn poisson_coefficient(fx: &[f64], pf: &[f64]) -> Result<f64, EstimatorError> {
    let n = fx.len();
    if n < 2 {
        return Err(EstimatorError::TooFewRecords { needed: 2, got: n });
    }
    let (mut a, mut sf, mut sfp) = (0.0, 0.0, 0.0);
    for i in 0..n {
        a += fx[i] * (fx[i] + pf[i]);
        sf += fx[i];
        sfp += fx[i] + pf[i];
    }
    let num = a - sf * sfp / n as f64;
    let den: f64 = (1..n).map(|i| (fx[i] - pf[i - 1]).powi(2)).sum();
    check_den(den)?;
    Ok(num / den)
}

fn pf_imcv(ev: &Evaluated, gy: &[f64], eq_g: f64, c2: f64) -> Vec<f64> {
    (0..ev.len())
        .map(|i| ev.fx[i] + ev.alpha[i] * (ev.fy[i] - ev.fx[i]) - c2 * (gy[i] - eq_g))
        .collect()
}

/// `ĉ₁` with `PF(x, y) = F(x) + α(x,y)(F(y) - F(x)) - ĉ₂(F(y) - E_q[F])`.
pub fn fit_c1(ev: &Evaluated, eq_f: f64, c2: f64) -> Result<f64, EstimatorError> {
    poisson_coefficient(&ev.fx, &pf_imcv(ev, &ev.fy, eq_f, c2))
}

fn or_one(r: Result<f64, EstimatorError>, what: &str) -> f64 {
    match r {
        Ok(c) => c,
        Err(e) => {
            warn!("{what}: {e}; using 1");
            1.0
        }
    }
}

/// `(1/n) Σ {F(Xᵢ) + c₁[αᵢ(F(Yᵢ) - F(Xᵢ)) - c₂(F(Yᵢ) - E_q[F])]}` at given coefficients.
pub fn imcv_with_coefficients(ev: &Evaluated, eq_f: f64, c1: f64, c2: f64) -> f64 {
    mean((0..ev.len()).map(|i| {
        ev.fx[i] + c1 * (ev.alpha[i] * (ev.fy[i] - ev.fx[i]) - c2 * (ev.fy[i] - eq_f))
    }))
}

/// IMCV with fitted `(ĉ₁, ĉ₂)`; a degenerate fit falls back to 1.
pub fn est_imcv_coef(ev: &Evaluated, eq_f: f64) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 2)?;
    let c2 = or_one(fit_c2(ev, eq_f), "c2");
    let c1 = or_one(fit_c1(ev, eq_f, c2), "c1");
    Ok(EstimatorReport {
        kind: EstimatorKind::ImcvCoef,
        value: imcv_with_coefficients(ev, eq_f, c1, c2),
        c1: Some(c1),
        c2: Some(c2),
        n_used: ev.len(),
    })
}

/// Coupling estimator over records `2..n`:
/// `(1/(n-1)) Σ {F(Xᵢ) - ĉ(F(Y_{i-1}) - E_q[F])}`.
pub fn est_cim(ev: &Evaluated, eq_f: f64, with_coef: bool) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 2)?;
    let n = ev.len();
    let fx = &ev.fx[1..];
    let c = if with_coef {
        let pf: Vec<f64> = (1..n).map(|i| ev.fx[i] - (ev.fy[i - 1] - eq_f)).collect();
        or_one(poisson_coefficient(fx, &pf), "coupling coefficient")
    } else {
        1.0
    };
    // E_q[F] + mean{(F(Xᵢ) - F(Y_{i-1})) + (1 - ĉ)(F(Y_{i-1}) - E_q[F])}
    let value = eq_f
        + mean((1..n).map(|i| (ev.fx[i] - ev.fy[i - 1]) + (1.0 - c) * (ev.fy[i - 1] - eq_f)));
    Ok(EstimatorReport {
        kind: if with_coef { EstimatorKind::CimCoef } else { EstimatorKind::Cim },
        value,
        c1: with_coef.then_some(c),
        c2: None,
        n_used: n - 1,
    })
}

/// Batch estimator: each batch uses its own proposal's `E_q[F]`, with the
/// control-variate sign of the single-proposal IMCV estimator. With
/// coefficients, `(ĉ₁ᵢ, ĉ₂ᵢ)` are fitted per batch; the report carries their
/// averages.
pub fn est_batch(
    ev: &Evaluated,
    batches: &[(Range<usize>, Option<f64>)],
    with_coef: bool,
) -> Result<EstimatorReport, EstimatorError> {
    nonempty(ev, 1)?;
    if batches.is_empty() {
        return Err(EstimatorError::TooFewRecords { needed: 1, got: 0 });
    }
    let n = ev.len();
    if !with_coef {
        let mut base = 0.0;
        let mut resid = vec![0.0; n];
        for (b, (range, eq)) in batches.iter().enumerate() {
            let eq = eq.ok_or(EstimatorError::MissingExpectation(b))?;
            base += eq * (range.len() as f64 / n as f64);
            for i in range.clone() {
                resid[i] = (ev.fx[i] - ev.fy[i]) + ev.alpha[i] * (ev.fy[i] - ev.fx[i]);
            }
        }
        return Ok(EstimatorReport::plain(EstimatorKind::Batch, base + mean(resid.into_iter()), n));
    }
    let mut total = 0.0;
    let (mut c1s, mut c2s) = (0.0, 0.0);
    for (b, (range, eq)) in batches.iter().enumerate() {
        let eq = eq.ok_or(EstimatorError::MissingExpectation(b))?;
        let sub = ev.slice(range.clone());
        let c2 = or_one(fit_c2(&sub, eq), "batch c2");
        let c1 = or_one(fit_c1(&sub, eq, c2), "batch c1");
        c1s += c1;
        c2s += c2;
        total += imcv_with_coefficients(&sub, eq, c1, c2) * sub.len() as f64;
    }
    let k = batches.len() as f64;
    Ok(EstimatorReport {
        kind: EstimatorKind::BatchCoef,
        value: total / n as f64,
        c1: Some(c1s / k),
        c2: Some(c2s / k),
        n_used: n,
    })
}

/// Batch ranges paired with the trajectory's recorded `E_q[F]` for function `f_index`.
pub fn batch_expectations(traj: &Trajectory, f_index: usize) -> Vec<(Range<usize>, Option<f64>)> {
    traj.batches
        .iter()
        .map(|b| (b.range.clone(), b.expectations.get(f_index).copied().flatten()))
        .collect()
}

/// Plain average of i.i.d. draws.
pub fn est_cmc(values: &[f64]) -> Result<EstimatorReport, EstimatorError> {
    if values.is_empty() {
        return Err(EstimatorError::TooFewRecords { needed: 1, got: 0 });
    }
    Ok(EstimatorReport::plain(EstimatorKind::Cmc, mean(values.iter().copied()), values.len()))
}

/// `Σ (aᵢ - ā)²`.
pub fn centered_ss(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied());
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    centered_ss(xs) / (xs.len() as f64 - 1.0)
}

/// `Σ(aᵢ - ā)² / Σ(bᵢ - b̄)²`: how many times more variable `a` is than `b`.
pub fn vrf(a: &[f64], b: &[f64]) -> Result<f64, EstimatorError> {
    for v in [a, b] {
        if v.len() < 2 {
            return Err(EstimatorError::TooFewRecords { needed: 2, got: v.len() });
        }
    }
    let den = centered_ss(b);
    if den == 0.0 {
        return Err(EstimatorError::ZeroDenominator);
    }
    Ok(centered_ss(a) / den)
}
