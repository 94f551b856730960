//! Closed-form deviation bounds evaluated in overflow-safe log-domain
//! arithmetic: `Delta_bar`, `D_bar`, `K(eps)`, `F(eps)`, the threshold
//! solves `eps_bar` and `eps_double_star`, the envelope decay condition,
//! and the O(sqrt(eps)) limit terms used by the asymptotic checks.

use std::fmt;
use std::io::Write;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::GammaEnvelope;
use crate::scheme::{self, SchemeError};

/// Sign-and-logarithm representation of a real number. Multiplication,
/// division and powers act on the log; addition goes through
/// log-sum-exp. Carries quantities like `e^{L S_eps}`-sized factors that
/// overflow `f64`.
#[derive(Clone, Copy, Debug)]
pub struct LogReal {
    sign: i8,
    ln_abs: f64,
}

impl LogReal {
    pub fn zero() -> Self {
        LogReal { sign: 0, ln_abs: f64::NEG_INFINITY }
    }

    pub fn one() -> Self {
        LogReal { sign: 1, ln_abs: 0.0 }
    }

    pub fn from_f64(x: f64) -> Self {
        if x == 0.0 {
            LogReal::zero()
        } else if x > 0.0 {
            LogReal { sign: 1, ln_abs: x.ln() }
        } else {
            LogReal { sign: -1, ln_abs: (-x).ln() }
        }
    }

    /// The positive number whose natural log is `ln`; `exp(ln)` without
    /// overflow.
    pub fn from_ln(ln: f64) -> Self {
        LogReal { sign: 1, ln_abs: ln }
    }

    pub fn to_f64(self) -> f64 {
        self.sign as f64 * self.ln_abs.exp()
    }

    pub fn sign(&self) -> i8 {
        self.sign
    }

    /// Natural log of the absolute value (`-inf` for zero).
    pub fn ln_abs(&self) -> f64 {
        self.ln_abs
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn is_positive(&self) -> bool {
        self.sign > 0
    }

    pub fn abs(self) -> Self {
        LogReal { sign: self.sign.abs(), ln_abs: self.ln_abs }
    }

    /// `self^p` for a positive base.
    pub fn powf(self, p: f64) -> Self {
        if self.is_zero() {
            return if p > 0.0 { LogReal::zero() } else { LogReal::from_ln(f64::INFINITY) };
        }
        assert!(self.sign > 0, "powf requires a positive base");
        LogReal { sign: 1, ln_abs: self.ln_abs * p }
    }

    pub fn sqrt(self) -> Self {
        self.powf(0.5)
    }

    pub fn recip(self) -> Self {
        LogReal { sign: self.sign, ln_abs: -self.ln_abs }
    }
}

impl Neg for LogReal {
    type Output = LogReal;

    fn neg(self) -> LogReal {
        LogReal { sign: -self.sign, ln_abs: self.ln_abs }
    }
}

impl Mul for LogReal {
    type Output = LogReal;

    fn mul(self, rhs: LogReal) -> LogReal {
        if self.sign == 0 || rhs.sign == 0 {
            return LogReal::zero();
        }
        LogReal { sign: self.sign * rhs.sign, ln_abs: self.ln_abs + rhs.ln_abs }
    }
}

impl Div for LogReal {
    type Output = LogReal;

    fn div(self, rhs: LogReal) -> LogReal {
        if self.sign == 0 {
            return LogReal::zero();
        }
        LogReal { sign: self.sign * rhs.sign, ln_abs: self.ln_abs - rhs.ln_abs }
    }
}

impl Add for LogReal {
    type Output = LogReal;

    fn add(self, rhs: LogReal) -> LogReal {
        if self.sign == 0 {
            return rhs;
        }
        if rhs.sign == 0 {
            return self;
        }
        // Order by magnitude so the exp argument is <= 0.
        let (big, small) = if self.ln_abs >= rhs.ln_abs { (self, rhs) } else { (rhs, self) };
        let d = small.ln_abs - big.ln_abs;
        if big.sign == small.sign {
            LogReal { sign: big.sign, ln_abs: big.ln_abs + d.exp().ln_1p() }
        } else {
            let m = -d.exp_m1(); // 1 - e^d in [0, 1]
            if m == 0.0 {
                LogReal::zero()
            } else {
                LogReal { sign: big.sign, ln_abs: big.ln_abs + m.ln() }
            }
        }
    }
}

impl Sub for LogReal {
    type Output = LogReal;

    fn sub(self, rhs: LogReal) -> LogReal {
        self + (-rhs)
    }
}

impl PartialEq for LogReal {
    fn eq(&self, other: &Self) -> bool {
        self.sign == other.sign && (self.sign == 0 || self.ln_abs == other.ln_abs)
    }
}

impl PartialOrd for LogReal {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        use std::cmp::Ordering;
        match self.sign.cmp(&other.sign) {
            Ordering::Equal => {}
            ord => return Some(ord),
        }
        match self.sign {
            0 => Some(Ordering::Equal),
            1 => self.ln_abs.partial_cmp(&other.ln_abs),
            _ => other.ln_abs.partial_cmp(&self.ln_abs),
        }
    }
}

impl fmt::Display for LogReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sign == 0 {
            return write!(f, "0");
        }
        let v = self.to_f64();
        if v.is_finite() && v != 0.0 {
            write!(f, "{v}")
        } else {
            write!(f, "{}exp({})", if self.sign < 0 { "-" } else { "" }, self.ln_abs)
        }
    }
}

/// The analysis constants feeding the bound formulas.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantSet {
    /// Lipschitz constant of `f` and `g` on the analysis domain.
    pub l: f64,
    /// Uniform bound on `||f||` and `||g||`.
    pub p: f64,
    /// Lipschitz constant of the average field.
    pub l_av: f64,
    /// Slow-ball radius.
    pub r: f64,
    /// `max_{z in M} ||z||`.
    pub z_bar: f64,
    /// Analysis horizon `T`.
    pub horizon: f64,
    /// Boundary-layer decay overshoot (`>= 1`).
    pub r_y: f64,
    /// Boundary-layer decay rate.
    pub beta_y: f64,
    /// Splitting constant in `(0, beta_y)`.
    pub delta_y: f64,
}

impl ConstantSet {
    /// Builds a set with the default splitting `delta_y = beta_y / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(l: f64, p: f64, l_av: f64, r: f64, z_bar: f64, horizon: f64, r_y: f64, beta_y: f64) -> Self {
        ConstantSet { l, p, l_av, r, z_bar, horizon, r_y, beta_y, delta_y: beta_y / 2.0 }
    }

    pub fn with_delta_y(mut self, delta_y: f64) -> Self {
        self.delta_y = delta_y;
        self
    }

    pub fn validate(&self) -> Result<(), BoundsError> {
        let fields = [
            ("l", self.l),
            ("p", self.p),
            ("l_av", self.l_av),
            ("r", self.r),
            ("z_bar", self.z_bar),
            ("horizon", self.horizon),
            ("r_y", self.r_y),
            ("beta_y", self.beta_y),
            ("delta_y", self.delta_y),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(BoundsError::BadInput(format!("constant {name} must be positive, got {v}")));
            }
        }
        if self.delta_y >= self.beta_y {
            return Err(BoundsError::BadInput(format!(
                "delta_y ({}) must be smaller than beta_y ({})",
                self.delta_y, self.beta_y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("grid too coarse for F(eps): S_eps = {s_eps} gives a vanishing decay denominator")]
    GridTooCoarse { s_eps: f64 },
    #[error("S_eps = {s} outside the measured envelope grid; extend s_grid")]
    ExtendSGrid { s: f64 },
    #[error(transparent)]
    Solve(#[from] SchemeError),
    #[error("{0}")]
    BadInput(String),
}

/// `1 + S L e^{L S}` as a log-domain value.
fn stiffness_factor(s_eps: f64, c: &ConstantSet) -> LogReal {
    let sle = LogReal::from_ln(c.l * s_eps) * LogReal::from_f64(s_eps * c.l);
    LogReal::one() + sle
}

/// Gronwall growth exponent `T L (1 + S L e^{L S})`.
fn growth_exponent(s_eps: f64, c: &ConstantSet) -> f64 {
    (LogReal::from_f64(c.horizon * c.l) * stiffness_factor(s_eps, c)).to_f64()
}

/// Uniform bound on the slow deviation `Delta_l`:
/// `(2 eps S P + T L (eps S P + eps)(1 + L S e^{L S})) e^{T L (1 + S L e^{L S})}`.
pub fn delta_bar(eps: f64, s_eps: f64, c: &ConstantSet) -> LogReal {
    let w = stiffness_factor(s_eps, c);
    let growth = LogReal::from_ln(growth_exponent(s_eps, c));
    let lead = LogReal::from_f64(2.0 * eps * s_eps * c.p);
    let drift = LogReal::from_f64(c.horizon * c.l)
        * (LogReal::from_f64(eps * s_eps * c.p) + LogReal::from_f64(eps))
        * w;
    (lead + drift) * growth
}

/// Uniform bound on the fast deviation `D_l`:
/// `S L (Delta_bar + eps S P + eps) e^{L S}`.
pub fn d_bar(eps: f64, s_eps: f64, delta_bar_val: LogReal, c: &ConstantSet) -> LogReal {
    let inner = delta_bar_val + LogReal::from_f64(eps * s_eps * c.p) + LogReal::from_f64(eps);
    LogReal::from_f64(s_eps * c.l) * inner * LogReal::from_ln(c.l * s_eps)
}

/// Slow-state closeness bound
/// `Delta_bar + T gamma(S) max{R, z_bar}
///  + eps S L_av (eps S P + T gamma(S) max{R, z_bar}) e^{eps S L_av}`.
pub fn k_eps(eps: f64, s_eps: f64, delta_bar_val: LogReal, gamma_at_seps: f64, c: &ConstantSet) -> LogReal {
    let big = c.r.max(c.z_bar);
    let avg_term = LogReal::from_f64(c.horizon * gamma_at_seps * big);
    let slow_growth = LogReal::from_ln(eps * s_eps * c.l_av);
    let correction = LogReal::from_f64(eps * s_eps * c.l_av)
        * (LogReal::from_f64(eps * s_eps * c.p) + avg_term)
        * slow_growth;
    delta_bar_val + avg_term + correction
}

/// Asymptotic fast-state neighborhood
/// `D_bar (1 + r_y e^{-beta_y S} / (1 - e^{-(beta_y - delta_y) S}))`.
pub fn f_eps(eps: f64, s_eps: f64, d_bar_val: LogReal, c: &ConstantSet) -> Result<LogReal, BoundsError> {
    let _ = eps;
    let q = (c.beta_y - c.delta_y) * s_eps;
    let denom = -(-q).exp_m1(); // 1 - e^{-q}
    if !(denom > 1e-12) {
        return Err(BoundsError::GridTooCoarse { s_eps });
    }
    let ratio = LogReal::from_ln(c.r_y.ln() - c.beta_y * s_eps) / LogReal::from_f64(denom);
    Ok(d_bar_val * (LogReal::one() + ratio))
}

/// Largest `eps` for which `e^{-delta_y S_eps} <= 1/r_y`. When
/// `r_y <= 1` every admissible `eps` qualifies and `eps1` is returned.
pub fn eps_bar(c: &ConstantSet, eps1: f64) -> Result<f64, BoundsError> {
    c.validate()?;
    if !(eps1 > 0.0) {
        return Err(BoundsError::BadInput(format!("eps1 must be positive, got {eps1}")));
    }
    if c.r_y <= 1.0 {
        return Ok(eps1);
    }
    let target_s = c.r_y.ln() / c.delta_y;
    let s_at = |eps: f64| scheme::solve_seps(c.l, c.horizon, eps);
    if s_at(eps1)? >= target_s {
        return Ok(eps1);
    }
    // S_eps grows without bound as eps -> 0, so expand down until the
    // target is bracketed, then bisect on ln(eps).
    let mut lo = eps1;
    loop {
        lo /= 100.0;
        if lo < 1e-290 {
            return Err(BoundsError::BadInput(
                "eps_bar search underflow; r_y too large for this constant set".to_string(),
            ));
        }
        if s_at(lo)? >= target_s {
            break;
        }
    }
    let mut ln_lo = lo.ln();
    let mut ln_hi = eps1.ln();
    for _ in 0..200 {
        let mid = 0.5 * (ln_lo + ln_hi);
        if s_at(mid.exp())? >= target_s {
            ln_lo = mid;
        } else {
            ln_hi = mid;
        }
        if ln_hi - ln_lo < 1e-14 {
            break;
        }
    }
    Ok(ln_lo.exp())
}

/// Result of the `eps_double_star` solve.
#[derive(Clone, Copy, Debug)]
pub struct EpsDoubleStar {
    pub eps: f64,
    /// Set when the equation has no root below `e^{-2}`; `eps` then
    /// holds the maximizing argument.
    pub vacuous: bool,
    pub residual: f64,
}

/// Solves `(beta_y - delta_y) t_a = eps ln(1/sqrt(eps))` for the root
/// below `e^{-2}`, where the right side is increasing.
pub fn eps_double_star(t_a: f64, c: &ConstantSet) -> Result<EpsDoubleStar, BoundsError> {
    c.validate()?;
    if !(t_a > 0.0) {
        return Err(BoundsError::BadInput(format!("t_a must be positive, got {t_a}")));
    }
    let target = (c.beta_y - c.delta_y) * t_a;
    let m = |eps: f64| -0.5 * eps * eps.ln(); // eps ln(1/sqrt(eps))
    let cap = (-2.0f64).exp();
    if target > m(cap) {
        return Ok(EpsDoubleStar { eps: cap, vacuous: true, residual: target - m(cap) });
    }
    let mut lo = f64::MIN_POSITIVE;
    let mut hi = cap;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Newton polish: m'(eps) = -0.5 (ln(eps) + 1).
    let mut eps = 0.5 * (lo + hi);
    for _ in 0..8 {
        let deriv = -0.5 * (eps.ln() + 1.0);
        if deriv.abs() < 1e-300 {
            break;
        }
        let next = eps - (m(eps) - target) / deriv;
        if next > 0.0 && next <= cap {
            eps = next;
        } else {
            break;
        }
    }
    Ok(EpsDoubleStar { eps, vacuous: false, residual: (target - m(eps)).abs() })
}

/// Per-epsilon outcome of the envelope decay condition
/// `gamma(S_eps) <= r' e^{-alpha1 T L (1 + S_eps L e^{L S_eps})}`.
#[derive(Clone, Copy, Debug)]
pub struct GammaConditionRow {
    pub eps: f64,
    pub s_eps: f64,
    pub ln_gamma: f64,
    pub ln_rhs: f64,
    /// `ln_gamma - ln_rhs`; positive means the condition fails.
    pub log_gap: f64,
    pub holds: bool,
}

pub fn check_gamma_condition(
    env: &GammaEnvelope,
    c: &ConstantSet,
    r_prime: f64,
    alpha1: f64,
    eps_grid: &[f64],
) -> Result<Vec<GammaConditionRow>, BoundsError> {
    c.validate()?;
    if !(alpha1 > 2.0) {
        return Err(BoundsError::BadInput(format!("alpha1 must exceed 2, got {alpha1}")));
    }
    if !(r_prime > 0.0) {
        return Err(BoundsError::BadInput(format!("r_prime must be positive, got {r_prime}")));
    }
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let s_eps = scheme::solve_seps(c.l, c.horizon, eps)?;
        let gamma = env.interp(s_eps).ok_or(BoundsError::ExtendSGrid { s: s_eps })?;
        let ln_gamma = if gamma > 0.0 { gamma.ln() } else { f64::NEG_INFINITY };
        let ln_rhs = r_prime.ln() - alpha1 * growth_exponent(s_eps, c);
        let log_gap = ln_gamma - ln_rhs;
        rows.push(GammaConditionRow { eps, s_eps, ln_gamma, ln_rhs, log_gap, holds: log_gap <= 0.0 });
    }
    Ok(rows)
}

/// One row of the bound report.
#[derive(Clone, Copy, Debug)]
pub struct BoundRow {
    pub eps: f64,
    pub s_eps: f64,
    pub delta_bar: LogReal,
    pub d_bar: LogReal,
    pub k: LogReal,
    pub f: LogReal,
}

impl BoundRow {
    pub fn ratio_delta_sqrt(&self) -> f64 {
        (self.delta_bar / LogReal::from_f64(self.eps.sqrt())).to_f64()
    }

    pub fn ratio_d_sqrt(&self) -> f64 {
        (self.d_bar / LogReal::from_f64(self.eps.sqrt())).to_f64()
    }
}

/// Evaluates all four bounds across an epsilon grid. `gamma` supplies
/// the envelope value at `S_eps` (analytic or interpolated).
pub fn bound_report<G: Fn(f64) -> f64>(
    c: &ConstantSet,
    gamma: G,
    eps_grid: &[f64],
) -> Result<Vec<BoundRow>, BoundsError> {
    c.validate()?;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let s_eps = scheme::solve_seps(c.l, c.horizon, eps)?;
        let db = delta_bar(eps, s_eps, c);
        let dd = d_bar(eps, s_eps, db, c);
        let k = k_eps(eps, s_eps, db, gamma(s_eps), c);
        let f = f_eps(eps, s_eps, dd, c)?;
        rows.push(BoundRow { eps, s_eps, delta_bar: db, d_bar: dd, k, f });
    }
    Ok(rows)
}

pub fn write_bound_report_csv<W: Write>(rows: &[BoundRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "eps,S_eps,log_Delta_bar,log_D_bar,log_K,log_F,ratio_Delta_sqrt,ratio_D_sqrt")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.eps,
            r.s_eps,
            r.delta_bar.ln_abs(),
            r.d_bar.ln_abs(),
            r.k.ln_abs(),
            r.f.ln_abs(),
            r.ratio_delta_sqrt(),
            r.ratio_d_sqrt()
        )?;
    }
    Ok(())
}

/// The six asymptotic ratio terms: the three `Delta_bar` summands over
/// `sqrt(eps)`, then the same three scaled by `ln(1/(eps^{1/4} S_eps))`
/// (the split used for `D_bar`). All must decrease as `eps -> 0`.
pub fn appendix_limit_terms(eps: f64, s_eps: f64, c: &ConstantSet) -> [f64; 6] {
    let w = stiffness_factor(s_eps, c);
    let growth = LogReal::from_ln(growth_exponent(s_eps, c));
    let inv_sqrt = LogReal::from_f64(eps.sqrt()).recip();
    let lead = LogReal::from_f64(2.0 * eps * s_eps * c.p) * growth * inv_sqrt;
    let drift_p = LogReal::from_f64(c.horizon * c.l * eps * s_eps * c.p) * w * growth * inv_sqrt;
    let drift_eps = LogReal::from_f64(c.horizon * c.l * eps) * w * growth * inv_sqrt;
    // ln(1/(eps^{1/4} S)) straight from the solved value.
    let lnq = -(0.25 * eps.ln() + s_eps.ln());
    let lnq_lr = LogReal::from_f64(lnq);
    [
        lead.to_f64(),
        drift_p.to_f64(),
        drift_eps.to_f64(),
        (lnq_lr * lead).to_f64(),
        (lnq_lr * drift_p).to_f64(),
        (lnq_lr * drift_eps).to_f64(),
    ]
}
