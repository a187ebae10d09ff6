//! Adaptive Gauss–Kronrod (7/15) quadrature on finite and semi-infinite ranges.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("quadrature did not converge on [{lo}, {hi}] (error estimate {err:e})")]
    NonConvergence { lo: f64, hi: f64, err: f64 },
    #[error("integrand is not finite at {0}")]
    NonFinite(f64),
    #[error("invalid interval [{0}, {1}]")]
    InvalidInterval(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub abs_err: f64,
}

pub const MAX_DEPTH: u32 = 60;

// Kronrod abscissae (positive half) and weights; Gauss weights for the
// embedded 7-point rule at the odd-indexed Kronrod nodes.
const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<(f64, f64), QuadError> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    if !fc.is_finite() {
        return Err(QuadError::NonFinite(c));
    }
    let mut kron = WK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XK[j];
        let (x1, x2) = (c - dx, c + dx);
        let (f1, f2) = (f(x1), f(x2));
        if !f1.is_finite() {
            return Err(QuadError::NonFinite(x1));
        }
        if !f2.is_finite() {
            return Err(QuadError::NonFinite(x2));
        }
        kron += WK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    Ok((kron * h, ((kron - gauss) * h).abs()))
}

fn adapt<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    whole: (f64, f64),
    depth: u32,
) -> Result<QuadResult, QuadError> {
    let (value, err) = whole;
    // Accept once the embedded-rule difference is within budget, or once it
    // has sunk to rounding level relative to the panel value.
    if err <= tol || err <= 50.0 * f64::EPSILON * value.abs() {
        return Ok(QuadResult { value, abs_err: err });
    }
    if depth >= MAX_DEPTH {
        return Err(QuadError::NonConvergence { lo: a, hi: b, err });
    }
    let m = 0.5 * (a + b);
    let left = gk15(f, a, m)?;
    let right = gk15(f, m, b)?;
    let l = adapt(f, a, m, 0.5 * tol, left, depth + 1)?;
    let r = adapt(f, m, b, 0.5 * tol, right, depth + 1)?;
    Ok(QuadResult { value: l.value + r.value, abs_err: l.abs_err + r.abs_err })
}

fn finite<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<QuadResult, QuadError> {
    if a == b {
        return Ok(QuadResult { value: 0.0, abs_err: 0.0 });
    }
    let whole = gk15(f, a, b)?;
    adapt(f, a, b, tol, whole, 0)
}

/// `∫ f` over `[lo, hi]` to absolute tolerance `tol`.
///
/// Either end may be infinite. A semi-infinite range `[lo, ∞)` is mapped to
/// `[0, 1)` by `x = lo + u/(1-u)`; the integrand is never evaluated at `u = 1`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<QuadResult, QuadError> {
    integrate_dyn(&f, lo, hi, tol)
}

fn integrate_dyn(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<QuadResult, QuadError> {
    if lo.is_nan() || hi.is_nan() || !(tol > 0.0) {
        return Err(QuadError::InvalidInterval(lo, hi));
    }
    if lo > hi {
        let r = integrate_dyn(f, hi, lo, tol)?;
        return Ok(QuadResult { value: -r.value, abs_err: r.abs_err });
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => finite(&f, lo, hi, tol),
        (true, false) => {
            let g = |u: f64| {
                let w = 1.0 - u;
                f(lo + u / w) / (w * w)
            };
            finite(&g, 0.0, 1.0, tol)
        }
        (false, true) => {
            let g = |u: f64| {
                let w = 1.0 - u;
                f(hi - u / w) / (w * w)
            };
            finite(&g, 0.0, 1.0, tol)
        }
        (false, false) => {
            let a = integrate_dyn(f, f64::NEG_INFINITY, 0.0, 0.5 * tol)?;
            let b = integrate_dyn(f, 0.0, f64::INFINITY, 0.5 * tol)?;
            Ok(QuadResult { value: a.value + b.value, abs_err: a.abs_err + b.abs_err })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| x * x, 0.0, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(r.value, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn prior_density_integrates_to_one() {
        let r = integrate(|g| (1.0 + g).powi(-2), 0.0, f64::INFINITY, 1e-10).unwrap();
        assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn gaussian_over_real_line() {
        let r = integrate(|x| (-0.5 * x * x).exp(), f64::NEG_INFINITY, f64::INFINITY, 1e-11).unwrap();
        assert_abs_diff_eq!(r.value, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let r = integrate(|x| x, 1.0, 0.0, 1e-12).unwrap();
        assert_abs_diff_eq!(r.value, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn peaked_integrand_refines() {
        // narrow bump at 0.3 of width 1e-3
        let s = 1e-3;
        let f = |x: f64| (-0.5 * ((x - 0.3) / s).powi(2)).exp();
        let r = integrate(f, 0.0, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(r.value, s * (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn singular_integrand_fails() {
        assert!(integrate(|x: f64| 1.0 / x, -1.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn non_integrable_oscillation_reports_nonconvergence() {
        let r = integrate(|x: f64| (1.0 / x).sin() / x, 1e-300, 1.0, 1e-14);
        assert!(matches!(r, Err(QuadError::NonConvergence { .. }) | Err(QuadError::NonFinite(_))));
    }
}
