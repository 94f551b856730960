//! The implicit interval-length map `S_eps`, the analysis time grid
//! `{t_l}`, the piecewise approximants `xi(t)` and `y(t)`, and the
//! per-interval deviation signals `Delta_l`, `d_l`, `D_l`.

use std::io::Write;

use thiserror::Error;

use crate::bounds::LogReal;
use crate::integrate::{Clock, FullRun, IntegrateError, IntegratorConfig, Trajectory, solve_ode};
use crate::model::SystemSpec;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("{0}")]
    BadInput(String),
    #[error("implicit solve failed to reach residual {target} (got {achieved}) for L={lip}, T={horizon}, eps={eps}")]
    NoConvergence { lip: f64, horizon: f64, eps: f64, target: f64, achieved: f64 },
    #[error("grid has {n} intervals, above the construction cap of {max}")]
    TooManyIntervals { n: usize, max: usize },
    #[error("grid/run mismatch: {0}")]
    GridMismatch(String),
    #[error("interval {index}: {source}")]
    Interval { index: usize, source: IntegrateError },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// Hard cap on explicit grid construction; beyond this the scheme is an
/// analysis device only and the closed-form bounds are the usable output.
pub const MAX_INTERVALS: usize = 5_000_000;

/// Log-residual of the defining equation at `u = ln S`:
/// `rho = ln S + T L (1 + S L e^{L S}) + ln(eps)/4`, so `rho = 0` at the
/// root. The superexponential term is carried in extended range.
fn log_residual(lip: f64, horizon: f64, eps: f64, u: f64) -> f64 {
    let s = u.exp();
    let sle = LogReal::from_ln(lip * s) * LogReal::from_f64(s * lip);
    let exponent = (LogReal::from_f64(horizon * lip) * (LogReal::one() + sle)).to_f64();
    u + exponent + 0.25 * eps.ln()
}

/// d(rho)/du = 1 + S * T L^2 e^{L S} (1 + L S).
fn log_residual_deriv(lip: f64, horizon: f64, u: f64) -> f64 {
    let s = u.exp();
    let term = LogReal::from_f64(horizon * lip * lip * s * (1.0 + lip * s)) * LogReal::from_ln(lip * s);
    1.0 + term.to_f64()
}

/// Solves `eps^{-1/4} = S e^{T L (1 + S L e^{L S})}` for the unique
/// positive root. Bracketing bisection in `ln S` followed by a Newton
/// polish; relative residual at the returned root is below `1e-10`.
pub fn solve_seps(lip: f64, horizon: f64, eps: f64) -> Result<f64, SchemeError> {
    if !(lip > 0.0) || !lip.is_finite() {
        return Err(SchemeError::BadInput(format!("L must be positive, got {lip}")));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(SchemeError::BadInput(format!("T must be positive, got {horizon}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SchemeError::BadInput(format!("eps must lie in (0, 1), got {eps}")));
    }

    // At S0 = eps^{-1/4} e^{-T L} the residual equals T L S0 L e^{L S0} >= 0,
    // so u_hi brackets from above.
    let mut u_hi = -0.25 * eps.ln() - horizon * lip;
    if u_hi.exp() == 0.0 {
        return Err(SchemeError::BadInput(format!(
            "S_eps underflows f64 for L={lip}, T={horizon}, eps={eps}"
        )));
    }
    let mut u_lo = u_hi - 1.0;
    let mut width = 1.0;
    while log_residual(lip, horizon, eps, u_lo) >= 0.0 {
        u_hi = u_lo;
        width *= 2.0;
        u_lo -= width;
        if width > 1e6 {
            return Err(SchemeError::NoConvergence {
                lip,
                horizon,
                eps,
                target: 1e-10,
                achieved: f64::INFINITY,
            });
        }
    }

    for _ in 0..200 {
        if u_hi - u_lo < 1e-13 * u_hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (u_lo + u_hi);
        if log_residual(lip, horizon, eps, mid) < 0.0 {
            u_lo = mid;
        } else {
            u_hi = mid;
        }
    }

    let mut u = 0.5 * (u_lo + u_hi);
    for _ in 0..30 {
        let r = log_residual(lip, horizon, eps, u);
        if r.abs() < 1e-14 {
            break;
        }
        let d = log_residual_deriv(lip, horizon, u);
        if !r.is_finite() || !d.is_finite() || d == 0.0 {
            break;
        }
        let next = u - r / d;
        if next < u_lo || next > u_hi {
            break;
        }
        u = next;
    }

    let achieved = log_residual(lip, horizon, eps, u).exp_m1().abs();
    if achieved > 1e-10 {
        return Err(SchemeError::NoConvergence { lip, horizon, eps, target: 1e-10, achieved });
    }
    Ok(u.exp())
}

/// Relative residual `|eps^{-1/4} - S e^{T L (1 + S L e^{L S})}| / eps^{-1/4}`.
pub fn seps_residual_rel(lip: f64, horizon: f64, eps: f64, s: f64) -> f64 {
    log_residual(lip, horizon, eps, s.ln()).exp_m1().abs()
}

/// The analysis partition of `[0, T]` into intervals of slow-time length
/// `eps * S_eps`, with a possibly shorter final interval ending at `T`
/// exactly.
#[derive(Clone, Debug)]
pub struct EpsGrid {
    pub eps: f64,
    pub s_eps: f64,
    pub t_grid: Vec<f64>,
    /// Set when `eps * S_eps >= T` collapses the partition to `[0, T]`.
    pub degenerate: bool,
    /// `floor(T / (eps S_eps))`, the top of the index set.
    pub floor_count: u64,
}

impl EpsGrid {
    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    pub fn num_intervals(&self) -> usize {
        self.t_grid.len() - 1
    }

    /// The index set `{0, ..., floor(T/(eps S_eps))}`.
    pub fn index_set(&self) -> std::ops::RangeInclusive<u64> {
        0..=self.floor_count
    }
}

pub fn build_time_grid(eps: f64, s_eps: f64, horizon: f64) -> Result<EpsGrid, SchemeError> {
    for (name, v) in [("eps", eps), ("s_eps", s_eps), ("horizon", horizon)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(SchemeError::BadInput(format!("{name} must be positive, got {v}")));
        }
    }
    let h = eps * s_eps;
    if h >= horizon {
        return Ok(EpsGrid { eps, s_eps, t_grid: vec![0.0, horizon], degenerate: true, floor_count: 0 });
    }
    // Largest k with k*h <= horizon, nudged against floating-point edges.
    let mut k = (horizon / h).floor();
    while (k + 1.0) * h <= horizon {
        k += 1.0;
    }
    while k * h > horizon {
        k -= 1.0;
    }
    let k_int = k as u64;
    let mut t_grid: Vec<f64> = (0..=k_int).map(|i| i as f64 * h).collect();
    if *t_grid.last().unwrap() < horizon {
        t_grid.push(horizon);
    }
    Ok(EpsGrid { eps, s_eps, t_grid, degenerate: false, floor_count: k_int })
}

/// Dense samples of one scheme interval at `refine + 1` equispaced
/// slow times including both endpoints.
#[derive(Clone, Debug)]
pub struct IntervalBlock {
    pub t: Vec<f64>,
    /// Flattened `xi` samples, `(refine + 1) * n`.
    pub xi: Vec<f64>,
    /// Flattened `y` samples, `(refine + 1) * m`.
    pub y: Vec<f64>,
}

/// The piecewise approximation run: knot values of `xi` and per-interval
/// dense samples of `xi(t)` and `y(t)`.
#[derive(Clone, Debug)]
pub struct SchemeRun {
    pub eps: f64,
    pub refine: usize,
    pub n: usize,
    pub m: usize,
    /// `xi_l` at every grid time (length `num_intervals + 1`).
    pub xi_knots: Vec<Vec<f64>>,
    pub intervals: Vec<IntervalBlock>,
}

impl SchemeRun {
    /// `xi(t)` flattened over all intervals with strictly increasing
    /// times (interval starts are kept, interior right endpoints are
    /// dropped as duplicates of the next start).
    pub fn xi_trajectory(&self) -> Trajectory {
        self.flatten(|b| &b.xi, self.n)
    }

    /// `y(t)` flattened the same way; `y` is discontinuous at the knots
    /// and the stored start values carry the reset `y(t_l) = z(t_l)`.
    pub fn y_trajectory(&self) -> Trajectory {
        self.flatten(|b| &b.y, self.m)
    }

    fn flatten<'a, F: Fn(&'a IntervalBlock) -> &'a [f64]>(&'a self, pick: F, dim: usize) -> Trajectory {
        let mut times = Vec::new();
        let mut states = Vec::new();
        let last = self.intervals.len() - 1;
        for (l, block) in self.intervals.iter().enumerate() {
            let vals = pick(block);
            let upper = if l == last { block.t.len() } else { block.t.len() - 1 };
            for j in 0..upper {
                times.push(block.t[j]);
                states.push(vals[j * dim..(j + 1) * dim].to_vec());
            }
        }
        Trajectory { clock: Clock::SlowTime, times, states }
    }
}

/// Builds `xi` and `y` over the grid. Per interval, `y` solves the
/// frozen-parameter fast system from `y(t_l) = z(t_l)` and `xi`
/// accumulates the slow field along it; both are advanced jointly in
/// fast time so each interval costs the same regardless of `eps`.
pub fn construct_xi_y(
    sys: &SystemSpec,
    grid: &EpsGrid,
    full: &FullRun,
    cfg: &IntegratorConfig,
    refine: usize,
) -> Result<SchemeRun, SchemeError> {
    if full.n != sys.n || full.m != sys.m {
        return Err(SchemeError::GridMismatch("full run dimensions do not match the system".into()));
    }
    if (full.eps - grid.eps).abs() > 1e-12 * grid.eps {
        return Err(SchemeError::GridMismatch(format!(
            "full run eps {} differs from grid eps {}",
            full.eps, grid.eps
        )));
    }
    if full.t_end < grid.horizon() - 1e-9 * grid.horizon() {
        return Err(SchemeError::GridMismatch(format!(
            "full run horizon {} does not cover the grid horizon {}",
            full.t_end,
            grid.horizon()
        )));
    }
    let n_int = grid.num_intervals();
    if n_int > MAX_INTERVALS {
        return Err(SchemeError::TooManyIntervals { n: n_int, max: MAX_INTERVALS });
    }
    let refine = refine.max(2);
    let (n, m) = (sys.n, sys.m);
    let eps = grid.eps;

    let mut xi_l = vec![0.0; n];
    full.eval_x(0.0, &mut xi_l)?;
    let mut xi_knots = Vec::with_capacity(n_int + 1);
    xi_knots.push(xi_l.clone());
    let mut intervals = Vec::with_capacity(n_int);
    let mut z_l = vec![0.0; m];

    for l in 0..n_int {
        let t_lo = grid.t_grid[l];
        let t_hi = grid.t_grid[l + 1];
        let span_t = t_hi - t_lo;
        if !(span_t > 0.0) {
            return Err(SchemeError::GridMismatch(format!("empty interval at index {l}")));
        }
        let span_tau = span_t / eps;
        full.eval_z(t_lo, &mut z_l)?;

        // Combined state (y, xi) in fast time with xi_l frozen.
        let mut w0 = Vec::with_capacity(m + n);
        w0.extend_from_slice(&z_l);
        w0.extend_from_slice(&xi_l);
        let frozen = xi_l.clone();
        let rhs = |_tau: f64, w: &[f64], dw: &mut [f64]| -> Result<(), IntegrateError> {
            let (y, _xi) = w.split_at(m);
            let (dy, dxi) = dw.split_at_mut(m);
            sys.eval_g(&frozen, y, 0.0, dy)?;
            sys.eval_f(&frozen, y, 0.0, dxi)?;
            for v in dxi.iter_mut() {
                *v *= eps;
            }
            Ok(())
        };
        let mut local = *cfg;
        if local.h == 0.0 {
            local.h = span_tau / 8.0;
        }
        let sol = solve_ode(rhs, 0.0, &w0, span_tau, &local)
            .map_err(|source| SchemeError::Interval { index: l, source })?;

        let mut t = Vec::with_capacity(refine + 1);
        let mut xi = Vec::with_capacity((refine + 1) * n);
        let mut y = Vec::with_capacity((refine + 1) * m);
        let mut buf = vec![0.0; m + n];
        let mut sampler = sol.sampler();
        for j in 0..=refine {
            let frac = j as f64 / refine as f64;
            let tau = span_tau * frac;
            sampler
                .eval_into(tau, &mut buf)
                .map_err(|source| SchemeError::Interval { index: l, source })?;
            t.push(if j == refine { t_hi } else { t_lo + span_t * frac });
            y.extend_from_slice(&buf[..m]);
            xi.extend_from_slice(&buf[m..]);
        }
        let end = sol.end_state();
        xi_l.copy_from_slice(&end[m..]);
        // Pin the stored endpoint to the exact chained knot.
        let base = refine * n;
        xi[base..base + n].copy_from_slice(&xi_l);
        xi_knots.push(xi_l.clone());
        intervals.push(IntervalBlock { t, xi, y });
    }

    Ok(SchemeRun { eps, refine, n, m, xi_knots, intervals })
}

/// Per-interval running maxima at the right endpoints:
/// `Delta_l = max ||x - xi||`, `d_l = max ||x - xi_l||`,
/// `D_l = max ||z - y||`, each over the interval's refinement samples.
#[derive(Clone, Debug)]
pub struct SignalTable {
    pub t_start: Vec<f64>,
    pub delta: Vec<f64>,
    pub d: Vec<f64>,
    pub big_d: Vec<f64>,
}

impl SignalTable {
    pub fn max_delta(&self) -> f64 {
        self.delta.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_d(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_big_d(&self) -> f64 {
        self.big_d.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "l,t_l,Delta_l,d_l,D_l")?;
        for l in 0..self.t_start.len() {
            writeln!(w, "{},{},{},{},{}", l, self.t_start[l], self.delta[l], self.d[l], self.big_d[l])?;
        }
        Ok(())
    }
}

/// Evaluates the deviation signals of a scheme run against the full
/// trajectories it approximates.
pub fn error_signals(full: &FullRun, run: &SchemeRun, grid: &EpsGrid) -> Result<SignalTable, SchemeError> {
    if run.intervals.len() != grid.num_intervals() {
        return Err(SchemeError::GridMismatch(format!(
            "run has {} intervals, grid has {}",
            run.intervals.len(),
            grid.num_intervals()
        )));
    }
    if full.t_end < grid.horizon() - 1e-9 * grid.horizon() {
        return Err(SchemeError::GridMismatch(
            "full run does not cover the grid horizon".to_string(),
        ));
    }
    let (n, m) = (run.n, run.m);
    let mut x_buf = vec![0.0; n];
    let mut z_buf = vec![0.0; m];
    let mut w_buf = vec![0.0; n + m];
    let mut sampler = full.sol.sampler();

    let n_int = run.intervals.len();
    let mut table = SignalTable {
        t_start: Vec::with_capacity(n_int),
        delta: Vec::with_capacity(n_int),
        d: Vec::with_capacity(n_int),
        big_d: Vec::with_capacity(n_int),
    };

    for (l, block) in run.intervals.iter().enumerate() {
        let xi_l = &run.xi_knots[l];
        let mut max_delta = 0.0f64;
        let mut max_d = 0.0f64;
        let mut max_big_d = 0.0f64;
        for (j, &tj) in block.t.iter().enumerate() {
            sampler
                .eval_into(full.tau_of(tj), &mut w_buf)
                .map_err(|source| SchemeError::Interval { index: l, source })?;
            x_buf.copy_from_slice(&w_buf[..n]);
            z_buf.copy_from_slice(&w_buf[n..]);
            let xi_j = &block.xi[j * n..(j + 1) * n];
            let y_j = &block.y[j * m..(j + 1) * m];
            let mut dd = 0.0;
            let mut dk = 0.0;
            for i in 0..n {
                dd += (x_buf[i] - xi_j[i]).powi(2);
                dk += (x_buf[i] - xi_l[i]).powi(2);
            }
            let mut dz = 0.0;
            for i in 0..m {
                dz += (z_buf[i] - y_j[i]).powi(2);
            }
            max_delta = max_delta.max(dd.sqrt());
            max_d = max_d.max(dk.sqrt());
            max_big_d = max_big_d.max(dz.sqrt());
        }
        table.t_start.push(block.t[0]);
        table.delta.push(max_delta);
        table.d.push(max_d);
        table.big_d.push(max_big_d);
    }
    Ok(table)
}
