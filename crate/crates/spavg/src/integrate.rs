//! Explicit Runge-Kutta integration (fixed-step RK4 and adaptive
//! Dormand-Prince 5(4)) with cubic Hermite dense output, plus wrappers
//! for the full two-time-scale system, the boundary-layer system and
//! the reduced average system.
//!
//! The full system is integrated in fast time `tau = t/eps` with the
//! combined state `(x, z)`, which keeps the fast subsystem O(1) per
//! step; output samples are re-stamped in slow time.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{ModelError, SystemSpec};

/// Which clock a trajectory's timestamps refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clock {
    SlowTime,
    FastTime,
}

impl fmt::Display for Clock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Clock::SlowTime => write!(f, "slow-time"),
            Clock::FastTime => write!(f, "fast-time"),
        }
    }
}

/// Time-stamped state samples from one integration run.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub clock: Clock,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("empty trajectory")
    }

    /// CSV with header `clock,t,state_0,...,state_{k-1}` and shortest
    /// round-trip decimal formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "clock,t")?;
        for j in 0..self.dim() {
            write!(w, ",state_{j}")?;
        }
        writeln!(w)?;
        for (t, s) in self.times.iter().zip(self.states.iter()) {
            write!(w, "{},{}", self.clock, t)?;
            for v in s {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("csv is valid utf-8")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Rk4Fixed,
    Rk45Adaptive,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rk4-fixed" => Ok(Method::Rk4Fixed),
            "rk45-adaptive" => Ok(Method::Rk45Adaptive),
            other => Err(format!("unknown method '{other}' (expected rk4-fixed or rk45-adaptive)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Rk4Fixed => write!(f, "rk4-fixed"),
            Method::Rk45Adaptive => write!(f, "rk45-adaptive"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Base step: the step of `rk4-fixed`, the initial step of
    /// `rk45-adaptive`. Zero means "choose automatically".
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// Optional cap on the accepted step, e.g. to bound dense-output
    /// interpolation error.
    pub h_max: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk45Adaptive,
            h: 0.0,
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            max_steps: 2_000_000,
            h_max: None,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), IntegrateError> {
        if self.h < 0.0 || !self.h.is_finite() {
            return Err(IntegrateError::BadInput(format!("base step must be >= 0, got {}", self.h)));
        }
        if self.method == Method::Rk4Fixed && self.h == 0.0 {
            return Err(IntegrateError::BadInput("rk4-fixed requires a positive base step".into()));
        }
        if self.rel_tol <= 0.0 || self.abs_tol <= 0.0 {
            return Err(IntegrateError::BadInput("tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(IntegrateError::BadInput("max_steps must be >= 1".into()));
        }
        if let Some(hm) = self.h_max {
            if hm <= 0.0 {
                return Err(IntegrateError::BadInput("h_max must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepLimit { t: f64, max_steps: usize },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("time {t} outside solution range [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("{0}")]
    BadInput(String),
}

/// Dense solution of one integration run: accepted nodes with state and
/// derivative, interpolated between nodes by cubic Hermite polynomials.
#[derive(Clone, Debug)]
pub struct Solution {
    dim: usize,
    ts: Vec<f64>,
    ys: Vec<f64>,
    fs: Vec<f64>,
}

impl Solution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.ts[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.ts.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.ts
    }

    pub fn n_nodes(&self) -> usize {
        self.ts.len()
    }

    pub fn state_at_node(&self, i: usize) -> &[f64] {
        &self.ys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn end_state(&self) -> &[f64] {
        self.state_at_node(self.ts.len() - 1)
    }

    /// Evaluates the interpolant at `t`, which must lie in the covered
    /// range up to a small slack.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), IntegrateError> {
        let i = self.locate(t)?;
        self.hermite(i, t, out);
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, IntegrateError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// Sequential evaluator for monotone non-decreasing query times;
    /// amortized O(1) per query.
    pub fn sampler(&self) -> SolutionSampler<'_> {
        SolutionSampler { sol: self, idx: 0 }
    }

    /// Samples the interpolant on the given times into a trajectory.
    pub fn sample_trajectory(&self, times: &[f64], clock: Clock) -> Result<Trajectory, IntegrateError> {
        let mut sampler = self.sampler();
        let mut states = Vec::with_capacity(times.len());
        for &t in times {
            let mut s = vec![0.0; self.dim];
            sampler.eval_into(t, &mut s)?;
            states.push(s);
        }
        Ok(Trajectory { clock, times: times.to_vec(), states })
    }

    /// Trajectory at the accepted integration nodes.
    pub fn node_trajectory(&self, clock: Clock) -> Trajectory {
        let states = (0..self.ts.len()).map(|i| self.state_at_node(i).to_vec()).collect();
        Trajectory { clock, times: self.ts.clone(), states }
    }

    fn locate(&self, t: f64) -> Result<usize, IntegrateError> {
        let t0 = self.t0();
        let t1 = self.t_end();
        let slack = 1e-9 * (t1 - t0).abs().max(1.0);
        if t < t0 - slack || t > t1 + slack {
            return Err(IntegrateError::OutOfRange { t, t0, t1 });
        }
        let t = t.clamp(t0, t1);
        // Index of the segment [ts[i], ts[i+1]] containing t.
        match self.ts.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
            Ok(i) => Ok(i.min(self.ts.len() - 2)),
            Err(i) => Ok((i - 1).min(self.ts.len() - 2)),
        }
    }

    fn hermite(&self, i: usize, t: f64, out: &mut [f64]) {
        let t0 = self.ts[i];
        let t1 = self.ts[i + 1];
        let h = t1 - t0;
        let th = ((t - t0) / h).clamp(0.0, 1.0);
        let th2 = th * th;
        let th3 = th2 * th;
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = th3 - 2.0 * th2 + th;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = th3 - th2;
        let d = self.dim;
        let (y0, y1) = (&self.ys[i * d..(i + 1) * d], &self.ys[(i + 1) * d..(i + 2) * d]);
        let (f0, f1) = (&self.fs[i * d..(i + 1) * d], &self.fs[(i + 1) * d..(i + 2) * d]);
        for k in 0..d {
            out[k] = h00 * y0[k] + h10 * h * f0[k] + h01 * y1[k] + h11 * h * f1[k];
        }
    }
}

pub struct SolutionSampler<'a> {
    sol: &'a Solution,
    idx: usize,
}

impl SolutionSampler<'_> {
    pub fn eval_into(&mut self, t: f64, out: &mut [f64]) -> Result<(), IntegrateError> {
        let ts = &self.sol.ts;
        let t1 = self.sol.t_end();
        let slack = 1e-9 * (t1 - ts[0]).abs().max(1.0);
        if t < ts[self.idx] - slack {
            // Query went backwards; fall back to a fresh search.
            self.idx = self.sol.locate(t)?;
        }
        if t > t1 + slack {
            return Err(IntegrateError::OutOfRange { t, t0: ts[0], t1 });
        }
        while self.idx + 2 < ts.len() && ts[self.idx + 1] < t {
            self.idx += 1;
        }
        self.sol.hermite(self.idx, t.clamp(ts[0], t1), out);
        Ok(())
    }
}

/// Integrates `dy/dt = rhs(t, y)` over `[t0, t_end]`.
pub fn solve_ode<F>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), IntegrateError>,
{
    cfg.validate()?;
    if !(t_end > t0) {
        return Err(IntegrateError::BadInput(format!(
            "t_end ({t_end}) must exceed t0 ({t0})"
        )));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::BadInput("initial state must be finite".into()));
    }
    match cfg.method {
        Method::Rk4Fixed => rk4_fixed(&mut rhs, t0, y0, t_end, cfg),
        Method::Rk45Adaptive => rk45_adaptive(&mut rhs, t0, y0, t_end, cfg),
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the 5th- and 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn rk45_adaptive<F>(
    rhs: &mut F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), IntegrateError>,
{
    let dim = y0.len();
    let span = t_end - t0;
    let h_cap = cfg.h_max.unwrap_or(f64::INFINITY).min(span);
    let mut h = if cfg.h > 0.0 { cfg.h.min(h_cap) } else { (span / 100.0).min(h_cap) };

    let mut ts = vec![t0];
    let mut ys = y0.to_vec();
    let mut fs = vec![0.0; dim];
    rhs(t0, y0, &mut fs)?;

    let mut k = vec![vec![0.0; dim]; 7];
    k[0].copy_from_slice(&fs);
    let mut y = y0.to_vec();
    let mut y_stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut t = t0;
    let mut steps = 0usize;
    let mut rejected_last = false;

    while t < t_end {
        if steps >= cfg.max_steps {
            return Err(IntegrateError::StepLimit { t, max_steps: cfg.max_steps });
        }
        steps += 1;
        let h_floor = 4.0 * f64::EPSILON * t.abs().max(t_end.abs());
        if h < h_floor.max(f64::MIN_POSITIVE * 1e4) {
            return Err(IntegrateError::StepUnderflow { t });
        }
        let mut h_step = h.min(h_cap);
        if t + h_step >= t_end {
            h_step = t_end - t;
        }

        // Stages 2..7 (k1 is fresh from FSAL or initialization).
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                y_stage[i] = y[i] + h_step * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            rhs(t + C[s] * h_step, &y_stage, &mut tail[0])?;
        }
        // 5th-order solution is the 7th stage argument (a7 row = b).
        for i in 0..dim {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(6) {
                acc += A[6][j] * kj[i];
            }
            y_new[i] = y[i] + h_step * acc;
        }

        // Scaled RMS error estimate.
        let mut err_sq = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            e *= h_step;
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / dim as f64).sqrt();

        if err <= 1.0 {
            if y_new.iter().any(|v| !v.is_finite()) {
                return Err(IntegrateError::NonFinite { t: t + h_step });
            }
            t += h_step;
            if t >= t_end {
                t = t_end;
            }
            y.copy_from_slice(&y_new);
            ts.push(t);
            ys.extend_from_slice(&y);
            fs.extend_from_slice(&k[6]); // k7 = f(t+h, y_new)
            let k7 = k[6].clone();
            k[0].copy_from_slice(&k7); // FSAL
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            let fac = if rejected_last { fac.min(1.0) } else { fac };
            h = h_step * fac;
            rejected_last = false;
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            h = h_step * fac;
            rejected_last = true;
        }
    }

    Ok(Solution { dim, ts, ys, fs })
}

fn rk4_fixed<F>(
    rhs: &mut F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), IntegrateError>,
{
    let dim = y0.len();
    let span = t_end - t0;
    let h_req = match cfg.h_max {
        Some(hm) => cfg.h.min(hm),
        None => cfg.h,
    };
    let n_steps = (span / h_req).ceil().max(1.0) as usize;
    if n_steps > cfg.max_steps {
        return Err(IntegrateError::StepLimit { t: t0, max_steps: cfg.max_steps });
    }
    let h = span / n_steps as f64;

    let mut ts = Vec::with_capacity(n_steps + 1);
    let mut ys = Vec::with_capacity((n_steps + 1) * dim);
    let mut fs = Vec::with_capacity((n_steps + 1) * dim);

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    rhs(t0, &y, &mut k1)?;
    ts.push(t0);
    ys.extend_from_slice(&y);
    fs.extend_from_slice(&k1);

    for step in 0..n_steps {
        let t = t0 + span * (step as f64 / n_steps as f64);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        rhs(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        rhs(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..dim {
            tmp[i] = y[i] + h * k3[i];
        }
        rhs(t + h, &tmp, &mut k4)?;
        for i in 0..dim {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_next = if step + 1 == n_steps { t_end } else { t0 + span * ((step + 1) as f64 / n_steps as f64) };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(IntegrateError::NonFinite { t: t_next });
        }
        rhs(t_next, &y, &mut k1)?;
        ts.push(t_next);
        ys.extend_from_slice(&y);
        fs.extend_from_slice(&k1);
    }

    Ok(Solution { dim, ts, ys, fs })
}

/// Dense result of a full-system run, held in fast time internally.
pub struct FullRun {
    pub eps: f64,
    pub n: usize,
    pub m: usize,
    /// Combined-state solution over fast time `[0, T/eps]`.
    pub sol: Solution,
    /// Slow-time horizon of the run.
    pub t_end: f64,
}

impl FullRun {
    pub fn eval_x(&self, t_slow: f64, out: &mut [f64]) -> Result<(), IntegrateError> {
        let mut w = vec![0.0; self.n + self.m];
        self.sol.eval_into(self.tau_of(t_slow), &mut w)?;
        out.copy_from_slice(&w[..self.n]);
        Ok(())
    }

    pub fn eval_z(&self, t_slow: f64, out: &mut [f64]) -> Result<(), IntegrateError> {
        let mut w = vec![0.0; self.n + self.m];
        self.sol.eval_into(self.tau_of(t_slow), &mut w)?;
        out.copy_from_slice(&w[self.n..]);
        Ok(())
    }

    /// Maps a slow time onto the internal fast-time axis, clamping the
    /// horizon endpoint exactly.
    pub fn tau_of(&self, t_slow: f64) -> f64 {
        if t_slow >= self.t_end {
            self.sol.t_end()
        } else {
            t_slow / self.eps
        }
    }

    /// Slow and fast trajectories re-stamped in slow time on the shared
    /// grid of accepted steps.
    pub fn trajectories(&self) -> (Trajectory, Trajectory) {
        let nodes = self.sol.n_nodes();
        let mut times = Vec::with_capacity(nodes);
        for (i, tau) in self.sol.times().iter().enumerate() {
            if i + 1 == nodes {
                times.push(self.t_end);
            } else {
                times.push(self.eps * tau);
            }
        }
        let mut xs = Vec::with_capacity(nodes);
        let mut zs = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let w = self.sol.state_at_node(i);
            xs.push(w[..self.n].to_vec());
            zs.push(w[self.n..].to_vec());
        }
        (
            Trajectory { clock: Clock::SlowTime, times: times.clone(), states: xs },
            Trajectory { clock: Clock::SlowTime, times, states: zs },
        )
    }
}

/// Integrates the full system over slow time `[0, t_end]` and returns a
/// dense run.
pub fn integrate_full_dense(
    sys: &SystemSpec,
    x0: &[f64],
    z0: &[f64],
    eps: f64,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<FullRun, IntegrateError> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(IntegrateError::BadInput(format!("eps must be positive, got {eps}")));
    }
    if x0.len() != sys.n || z0.len() != sys.m {
        return Err(IntegrateError::BadInput(format!(
            "state dimensions ({}, {}) do not match the system ({}, {})",
            x0.len(),
            z0.len(),
            sys.n,
            sys.m
        )));
    }
    let n = sys.n;
    let m = sys.m;
    let tau_end = t_end / eps;
    let mut w0 = Vec::with_capacity(n + m);
    w0.extend_from_slice(x0);
    w0.extend_from_slice(z0);
    let rhs = |_tau: f64, w: &[f64], dw: &mut [f64]| -> Result<(), IntegrateError> {
        let (x, z) = w.split_at(n);
        let (dx, dz) = dw.split_at_mut(n);
        sys.eval_f(x, z, eps, dx)?;
        sys.eval_g(x, z, eps, dz)?;
        for v in dx.iter_mut() {
            *v *= eps;
        }
        Ok(())
    };
    let sol = solve_ode(rhs, 0.0, &w0, tau_end, cfg)?;
    Ok(FullRun { eps, n, m, sol, t_end })
}

/// Full-system integration returning `(x, z)` trajectories on a shared
/// slow-time grid.
pub fn integrate_full(
    sys: &SystemSpec,
    x0: &[f64],
    z0: &[f64],
    eps: f64,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, Trajectory), IntegrateError> {
    Ok(integrate_full_dense(sys, x0, z0, eps, t_end, cfg)?.trajectories())
}

/// Integrates the boundary-layer system `dz/dtau = g(x_frozen, z, 0)` in
/// fast time and returns the dense solution.
pub fn integrate_boundary_layer_dense(
    sys: &SystemSpec,
    x_frozen: &[f64],
    z0: &[f64],
    tau_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError> {
    if x_frozen.len() != sys.n || z0.len() != sys.m {
        return Err(IntegrateError::BadInput("state dimensions do not match the system".into()));
    }
    let rhs = |_tau: f64, z: &[f64], dz: &mut [f64]| -> Result<(), IntegrateError> {
        sys.eval_g(x_frozen, z, 0.0, dz)?;
        Ok(())
    };
    solve_ode(rhs, 0.0, z0, tau_end, cfg)
}

pub fn integrate_boundary_layer(
    sys: &SystemSpec,
    x_frozen: &[f64],
    z0: &[f64],
    tau_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrateError> {
    Ok(integrate_boundary_layer_dense(sys, x_frozen, z0, tau_end, cfg)?
        .node_trajectory(Clock::FastTime))
}

/// Integrates the reduced average system `dx/dt = f_av(x)` in slow time.
pub fn integrate_reduced_dense<F>(
    mut f_av: F,
    x0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), IntegrateError>,
{
    let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| f_av(x, dx);
    solve_ode(rhs, 0.0, x0, t_end, cfg)
}

pub fn integrate_reduced<F>(
    f_av: F,
    x0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrateError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), IntegrateError>,
{
    Ok(integrate_reduced_dense(f_av, x0, t_end, cfg)?.node_trajectory(Clock::SlowTime))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example, norm};

    fn linear_rhs(_t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), IntegrateError> {
        dy[0] = -y[0];
        Ok(())
    }

    #[test]
    fn adaptive_tracks_exponential_within_tolerance() {
        let cfg = IntegratorConfig { rel_tol: 1e-10, abs_tol: 1e-12, ..Default::default() };
        let sol = solve_ode(linear_rhs, 0.0, &[1.0], 5.0, &cfg).unwrap();
        let got = sol.end_state()[0];
        let want = (-5.0f64).exp();
        assert!((got - want).abs() <= 10.0 * cfg.rel_tol * want.abs().max(1.0));
    }

    #[test]
    fn rk4_fixed_is_fourth_order() {
        let err_for = |h: f64| {
            let cfg = IntegratorConfig { method: Method::Rk4Fixed, h, ..Default::default() };
            let sol = solve_ode(linear_rhs, 0.0, &[1.0], 2.0, &cfg).unwrap();
            (sol.end_state()[0] - (-2.0f64).exp()).abs()
        };
        let e1 = err_for(0.02);
        let e2 = err_for(0.01);
        let ratio = e1 / e2;
        assert!((14.0..=18.0).contains(&ratio), "order ratio {ratio}");
    }

    #[test]
    fn constant_field_stays_put() {
        let rhs = |_t: f64, _y: &[f64], dy: &mut [f64]| -> Result<(), IntegrateError> {
            dy.fill(0.0);
            Ok(())
        };
        let sol = solve_ode(rhs, 0.0, &[3.0, -1.0], 10.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(sol.end_state(), &[3.0, -1.0]);
        let mid = sol.eval(4.321).unwrap();
        assert_eq!(mid, vec![3.0, -1.0]);
    }

    #[test]
    fn dense_output_is_accurate_between_nodes() {
        // Cubic Hermite interpolation error is O(h^4); capping the step
        // keeps it below the assertion.
        let cfg = IntegratorConfig { h_max: Some(0.02), ..Default::default() };
        let sol = solve_ode(linear_rhs, 0.0, &[1.0], 3.0, &cfg).unwrap();
        for k in 0..=300 {
            let t = 3.0 * k as f64 / 300.0;
            let got = sol.eval(t).unwrap()[0];
            assert!((got - (-t).exp()).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn full_run_constant_fields() {
        use crate::model::{SystemSpec, VectorField};
        use std::sync::Arc;
        let f: VectorField = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let g: VectorField = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let sys = SystemSpec { name: "frozen".into(), n: 1, m: 2, f, g, excluded: None };
        let (xt, zt) =
            integrate_full(&sys, &[2.0], &[0.3, -0.4], 0.1, 1.0, &IntegratorConfig::default())
                .unwrap();
        assert_eq!(xt.last_state(), &[2.0]);
        assert_eq!(zt.last_state(), &[0.3, -0.4]);
        assert_eq!(xt.times.last().copied().unwrap(), 1.0);
    }

    #[test]
    fn full_run_example_stays_in_domain() {
        let (sys, dom, _) = builtin_example();
        let run = integrate_full_dense(&sys, &[2.0], &[0.0, 1.5], 0.15, 10.0, &IntegratorConfig::default())
            .unwrap();
        for i in 0..run.sol.n_nodes() {
            let w = run.sol.state_at_node(i);
            assert!(dom.contains_slow(&w[..1]), "x left B_R at node {i}");
            assert!(
                dom.contains_fast(&w[1..]) || norm(&w[1..]) <= 1.5 + 1e-9,
                "z left M at node {i}: {:?}",
                &w[1..]
            );
        }
    }

    #[test]
    fn full_run_small_eps_completes_in_fast_time() {
        let (sys, dom, _) = builtin_example();
        let run = integrate_full_dense(&sys, &[2.0], &[0.0, 1.5], 0.015, 10.0, &IntegratorConfig::default())
            .unwrap();
        for i in 0..run.sol.n_nodes() {
            let z = &run.sol.state_at_node(i)[1..];
            assert!(dom.contains_fast(z) || (norm(z) - 1.5).abs() < 1e-9);
        }
    }

    #[test]
    fn boundary_layer_matches_closed_form() {
        let (sys, _, _) = builtin_example();
        let cfg = IntegratorConfig { h_max: Some(0.02), ..Default::default() };
        let sol = integrate_boundary_layer_dense(&sys, &[1.0], &[0.5, 0.0], 5.0, &cfg).unwrap();
        for k in 0..=100 {
            let tau = 5.0 * k as f64 / 100.0;
            let got = sol.eval(tau).unwrap();
            let want = crate::model::example_boundary_closed_form(&[0.5, 0.0], tau).unwrap();
            assert!((got[0] - want[0]).abs() < 1e-8, "tau={tau}");
            assert!((got[1] - want[1]).abs() < 1e-8, "tau={tau}");
        }
    }

    #[test]
    fn boundary_layer_on_attractor_stays() {
        let (sys, _, att) = builtin_example();
        let cfg = IntegratorConfig { h_max: Some(0.02), ..Default::default() };
        let sol = integrate_boundary_layer_dense(&sys, &[0.0], &[1.0, 0.0], 20.0, &cfg).unwrap();
        for k in 0..=200 {
            let tau = 20.0 * k as f64 / 200.0;
            let z = sol.eval(tau).unwrap();
            assert!(att.dist(&z) < 1e-8, "tau={tau} dist={}", att.dist(&z));
        }
    }

    #[test]
    fn reduced_matches_exponential_and_logistic() {
        let cfg = IntegratorConfig::default();
        let traj = integrate_reduced(
            |x: &[f64], dx: &mut [f64]| {
                dx[0] = -x[0];
                Ok(())
            },
            &[2.0],
            1.0,
            &cfg,
        )
        .unwrap();
        assert!((traj.last_state()[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-8);

        // dx/dt = -x^2 from 1: closed form 1/(1+t).
        let traj = integrate_reduced(
            |x: &[f64], dx: &mut [f64]| {
                dx[0] = -x[0] * x[0];
                Ok(())
            },
            &[1.0],
            1.0,
            &cfg,
        )
        .unwrap();
        assert!((traj.last_state()[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn excluded_region_aborts_run() {
        let (sys, _, _) = builtin_example();
        // Starting inside the excluded disc trips the check on the first
        // right-hand-side evaluation.
        let err = integrate_boundary_layer(&sys, &[0.0], &[0.01, 0.0], 1.0, &IntegratorConfig::default())
            .unwrap_err();
        assert!(matches!(err, IntegrateError::Model(ModelError::ExcludedRegion { .. })));
    }

    #[test]
    fn step_budget_is_enforced() {
        let cfg = IntegratorConfig { max_steps: 10, h_max: Some(1e-3), ..Default::default() };
        let err = solve_ode(linear_rhs, 0.0, &[1.0], 10.0, &cfg).unwrap_err();
        assert!(matches!(err, IntegrateError::StepLimit { .. }));
    }

    proptest::proptest! {
        // Shortest round-trip decimal formatting: parsing the CSV field
        // recovers the value bitwise.
        #[test]
        fn csv_decimal_formatting_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = format!("{x}");
            let back: f64 = s.parse().unwrap();
            proptest::prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn trajectory_csv_round_trips_values() {
        let traj = Trajectory {
            clock: Clock::SlowTime,
            times: vec![0.0, 0.1],
            states: vec![vec![1.0, -0.25], vec![0.5, 0.125]],
        };
        let csv = traj.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "clock,t,state_0,state_1");
        assert_eq!(lines.next().unwrap(), "slow-time,0,1,-0.25");
        assert_eq!(lines.next().unwrap(), "slow-time,0.1,0.5,0.125");
    }
}
