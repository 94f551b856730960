//! Epsilon sweeps measuring closeness of solutions, empirical
//! convergence-order fits, and reproduction of the demonstration figure
//! datasets.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::averaging::{AveragingError, build_fav_field};
use crate::bounds::{self, BoundsError, ConstantSet, LogReal};
use crate::integrate::{
    IntegrateError, IntegratorConfig, integrate_boundary_layer_dense, integrate_full_dense,
    integrate_reduced_dense,
};
use crate::model::SystemBundle;
use crate::plot::{LineChart, Series};
use crate::scheme::{self, SchemeError};

#[derive(Debug, Error)]
pub enum ExperimentsError {
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    BadInput(String),
}

/// One epsilon of a closeness sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub eps: f64,
    /// `sup_t ||x(t) - x_av(t)||` over the shared grid.
    pub sup_x_err: f64,
    /// `sup_{t >= t_a} | dist(z(t)) - dist(phi_b(t/eps)) |`.
    pub sup_z_gap: f64,
    pub k: LogReal,
    pub f: LogReal,
    pub status: Result<(), String>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub horizon: f64,
    pub t_a: f64,
}

/// Sweep inputs. `t_a` of zero means the default `horizon / 10`.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub horizon: f64,
    pub t_a: f64,
    pub eps_list: Vec<f64>,
    pub grid_points: usize,
    pub integ: IntegratorConfig,
    /// Averaging horizon for the numeric field fallback.
    pub t_av: f64,
}

impl SweepConfig {
    pub fn effective_t_a(&self) -> f64 {
        if self.t_a > 0.0 { self.t_a } else { self.horizon / 10.0 }
    }
}

/// Integrates full, boundary-layer and reduced systems per epsilon and
/// measures the closeness sup-norms on a shared dense grid, together
/// with the `K` and `F` bounds at that epsilon. Failed rows carry their
/// error and the sweep continues.
pub fn closeness_sweep<G: Fn(f64) -> f64>(
    bundle: &SystemBundle,
    cfg: &SweepConfig,
    constants: &ConstantSet,
    gamma: G,
) -> Result<SweepResult, ExperimentsError> {
    if cfg.eps_list.is_empty() {
        return Err(ExperimentsError::BadInput("eps_list must not be empty".into()));
    }
    let t_a = cfg.effective_t_a();
    if !(t_a > 0.0 && t_a < cfg.horizon) {
        return Err(ExperimentsError::BadInput(format!(
            "t_a must lie strictly inside (0, {}), got {t_a}",
            cfg.horizon
        )));
    }
    if cfg.grid_points < 2 {
        return Err(ExperimentsError::BadInput("grid_points must be at least 2".into()));
    }
    let mut rows = Vec::with_capacity(cfg.eps_list.len());
    for &eps in &cfg.eps_list {
        let start = Instant::now();
        match sweep_row(bundle, cfg, constants, &gamma, eps, t_a) {
            Ok(mut row) => {
                row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                rows.push(row);
            }
            Err(err) => rows.push(SweepRow {
                eps,
                sup_x_err: f64::NAN,
                sup_z_gap: f64::NAN,
                k: LogReal::zero(),
                f: LogReal::zero(),
                status: Err(err.to_string()),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            }),
        }
    }
    Ok(SweepResult { rows, horizon: cfg.horizon, t_a })
}

fn sweep_row<G: Fn(f64) -> f64>(
    bundle: &SystemBundle,
    cfg: &SweepConfig,
    constants: &ConstantSet,
    gamma: &G,
    eps: f64,
    t_a: f64,
) -> Result<SweepRow, ExperimentsError> {
    if !(eps > 0.0 && eps <= bundle.dom.eps1) {
        return Err(ExperimentsError::BadInput(format!(
            "eps {eps} outside (0, {}]",
            bundle.dom.eps1
        )));
    }
    let sys = &bundle.sys;
    let full = integrate_full_dense(sys, &cfg.x0, &cfg.z0, eps, cfg.horizon, &cfg.integ)?;
    // Forward invariance is an assumption, not a theorem; check it per
    // trajectory and fail the row on violation.
    if let Some(t_exit) = crate::constants::first_domain_exit(&full, &bundle.dom) {
        return Err(ExperimentsError::BadInput(format!(
            "trajectory left the invariant domain at t = {t_exit}"
        )));
    }
    let boundary =
        integrate_boundary_layer_dense(sys, &cfg.x0, &cfg.z0, cfg.horizon / eps, &cfg.integ)?;
    let reduced = match &bundle.f_av_analytic {
        Some(fav) => {
            let fav = fav.clone();
            integrate_reduced_dense(
                move |x: &[f64], out: &mut [f64]| {
                    fav(x, out);
                    Ok(())
                },
                &cfg.x0,
                cfg.horizon,
                &cfg.integ,
            )?
        }
        None => {
            let field = build_fav_field(sys, &cfg.z0, cfg.t_av, &cfg.integ);
            integrate_reduced_dense(
                |x: &[f64], out: &mut [f64]| {
                    field.eval(x, out).map_err(|e| IntegrateError::BadInput(e.to_string()))
                },
                &cfg.x0,
                cfg.horizon,
                &cfg.integ,
            )?
        }
    };

    let n = sys.n;
    let m = sys.m;
    let g = cfg.grid_points;
    let mut w = vec![0.0; n + m];
    let mut xav = vec![0.0; n];
    let mut zb = vec![0.0; m];
    let mut full_s = full.sol.sampler();
    let mut red_s = reduced.sampler();
    let mut bnd_s = boundary.sampler();
    let mut sup_x = 0.0f64;
    let mut sup_z = 0.0f64;
    for j in 0..=g {
        let t = cfg.horizon * j as f64 / g as f64;
        full_s.eval_into(full.tau_of(t), &mut w)?;
        red_s.eval_into(t.min(cfg.horizon), &mut xav)?;
        let mut dx = 0.0;
        for i in 0..n {
            dx += (w[i] - xav[i]).powi(2);
        }
        sup_x = sup_x.max(dx.sqrt());
        if t >= t_a {
            bnd_s.eval_into(full.tau_of(t), &mut zb)?;
            let gap = (bundle.att.dist(&w[n..]) - bundle.att.dist(&zb)).abs();
            sup_z = sup_z.max(gap);
        }
    }

    let s_eps = scheme::solve_seps(constants.l, constants.horizon, eps)?;
    let db = bounds::delta_bar(eps, s_eps, constants);
    let dd = bounds::d_bar(eps, s_eps, db, constants);
    let k = bounds::k_eps(eps, s_eps, db, gamma(s_eps), constants);
    let f = bounds::f_eps(eps, s_eps, dd, constants)?;
    Ok(SweepRow { eps, sup_x_err: sup_x, sup_z_gap: sup_z, k, f, status: Ok(()), wall_ms: 0.0 })
}

/// Whether sweep CSV rows carry measured wall time or zeros (for
/// bit-reproducible records).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimingMode {
    Real,
    Zeroed,
}

pub fn write_sweep_csv<W: Write>(
    result: &SweepResult,
    timing: TimingMode,
    seed: Option<u64>,
    mut w: W,
) -> std::io::Result<()> {
    if let Some(s) = seed {
        writeln!(w, "# seed={s}")?;
    }
    writeln!(w, "eps,sup_x_err,sup_z_gap,log_K,log_F,status,wall_ms")?;
    for r in &result.rows {
        let status = if r.status.is_ok() { "ok" } else { "failed" };
        let wall = match timing {
            TimingMode::Real => r.wall_ms,
            TimingMode::Zeroed => 0.0,
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.eps,
            r.sup_x_err,
            r.sup_z_gap,
            r.k.ln_abs(),
            r.f.ln_abs(),
            status,
            wall
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub enum FitColumn {
    SupXErr,
    SupZGap,
}

/// Least-squares order fit of `ln(err)` against `ln(eps)`.
#[derive(Clone, Copy, Debug)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_used: usize,
    pub n_dropped: usize,
    pub span_decades: f64,
}

impl OrderFit {
    /// The sqrt-order verdict with the 0.05 margin.
    pub fn order_at_least_half(&self) -> bool {
        self.slope >= 0.5 - 0.05
    }
}

pub fn fit_order(result: &SweepResult, column: FitColumn) -> Result<OrderFit, ExperimentsError> {
    let mut pts = Vec::new();
    let mut dropped = 0usize;
    for r in &result.rows {
        if r.status.is_err() {
            dropped += 1;
            continue;
        }
        let v = match column {
            FitColumn::SupXErr => r.sup_x_err,
            FitColumn::SupZGap => r.sup_z_gap,
        };
        if !(v > 0.0) || !v.is_finite() {
            // Zero or negative errors have no logarithm; note and drop.
            dropped += 1;
            continue;
        }
        pts.push((r.eps.ln(), v.ln()));
    }
    if pts.len() < 4 {
        return Err(ExperimentsError::BadInput(format!(
            "order fit needs at least 4 usable rows, have {}",
            pts.len()
        )));
    }
    let min_eps = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_eps = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span_decades = (max_eps - min_eps) / std::f64::consts::LN_10;

    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(OrderFit { slope, intercept, r2, n_used: pts.len(), n_dropped: dropped, span_decades })
}

/// Inputs of the figure reproduction.
#[derive(Clone, Debug)]
pub struct FiguresConfig {
    pub eps_a: f64,
    pub eps_b: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub grid_points: usize,
    pub integ: IntegratorConfig,
}

impl Default for FiguresConfig {
    fn default() -> Self {
        FiguresConfig {
            eps_a: 0.15,
            eps_b: 0.015,
            horizon: 10.0,
            x0: vec![2.0],
            z0: vec![0.0, 1.5],
            grid_points: 2000,
            integ: IntegratorConfig::default(),
        }
    }
}

/// Figure datasets plus summary statistics used by the verification
/// suite.
#[derive(Clone, Debug)]
pub struct FiguresOutput {
    pub fig1_csv: String,
    pub fig2_csv: String,
    pub fig1_svg: String,
    pub fig2_svg: String,
    /// `sup_t |x(t; eps_a) - x_av(t)|`.
    pub sup_diff_a: f64,
    pub sup_diff_b: f64,
    /// Worst attractor distance after the decay transient, per epsilon.
    pub max_dist_after_transient_a: f64,
    pub max_dist_after_transient_b: f64,
    pub transient_a: f64,
    pub transient_b: f64,
}

/// Produces the two figure datasets (slow state against the reduced
/// solution; fast-state norm) at the two reference epsilons.
pub fn reproduce_figures(
    bundle: &SystemBundle,
    cfg: &FiguresConfig,
) -> Result<FiguresOutput, ExperimentsError> {
    let sys = &bundle.sys;
    if sys.n != 1 {
        return Err(ExperimentsError::BadInput(
            "figure reproduction expects a scalar slow state".to_string(),
        ));
    }
    for &(name, eps) in &[("eps_a", cfg.eps_a), ("eps_b", cfg.eps_b)] {
        if !(eps > 0.0 && eps <= bundle.dom.eps1) {
            return Err(ExperimentsError::BadInput(format!(
                "{name} = {eps} outside (0, {}]",
                bundle.dom.eps1
            )));
        }
    }
    let run_a = integrate_full_dense(sys, &cfg.x0, &cfg.z0, cfg.eps_a, cfg.horizon, &cfg.integ)?;
    let run_b = integrate_full_dense(sys, &cfg.x0, &cfg.z0, cfg.eps_b, cfg.horizon, &cfg.integ)?;
    let reduced = match &bundle.f_av_analytic {
        Some(fav) => {
            let fav = fav.clone();
            integrate_reduced_dense(
                move |x: &[f64], out: &mut [f64]| {
                    fav(x, out);
                    Ok(())
                },
                &cfg.x0,
                cfg.horizon,
                &cfg.integ,
            )?
        }
        None => {
            let field = build_fav_field(sys, &cfg.z0, 500.0, &cfg.integ);
            integrate_reduced_dense(
                |x: &[f64], out: &mut [f64]| {
                    field.eval(x, out).map_err(|e| IntegrateError::BadInput(e.to_string()))
                },
                &cfg.x0,
                cfg.horizon,
                &cfg.integ,
            )?
        }
    };

    let m = sys.m;
    let g = cfg.grid_points;
    let mut wa = vec![0.0; 1 + m];
    let mut wb = vec![0.0; 1 + m];
    let mut xav = vec![0.0; 1];
    let mut sa = run_a.sol.sampler();
    let mut sb = run_b.sol.sampler();
    let mut sr = reduced.sampler();

    let mut fig1 = String::new();
    let mut fig2 = String::new();
    fig1.push_str(&format!("t,x_eps_{},x_eps_{},x_av\n", cfg.eps_a, cfg.eps_b));
    fig2.push_str(&format!("t,znorm_eps_{},znorm_eps_{}\n", cfg.eps_a, cfg.eps_b));

    let dist0 = bundle.att.dist(&cfg.z0);
    let transient = |eps: f64| {
        if dist0 > 0.01 { 5.0 * eps * (100.0 * dist0).ln() } else { 0.0 }
    };
    let transient_a = transient(cfg.eps_a);
    let transient_b = transient(cfg.eps_b);

    let mut sup_a = 0.0f64;
    let mut sup_b = 0.0f64;
    let mut dist_a = 0.0f64;
    let mut dist_b = 0.0f64;
    let mut xs_a = Vec::with_capacity(g + 1);
    let mut xs_b = Vec::with_capacity(g + 1);
    let mut xs_av = Vec::with_capacity(g + 1);
    let mut zn_a = Vec::with_capacity(g + 1);
    let mut zn_b = Vec::with_capacity(g + 1);
    let mut ts = Vec::with_capacity(g + 1);

    for j in 0..=g {
        let t = cfg.horizon * j as f64 / g as f64;
        sa.eval_into(run_a.tau_of(t), &mut wa)?;
        sb.eval_into(run_b.tau_of(t), &mut wb)?;
        sr.eval_into(t, &mut xav)?;
        let za = &wa[1..];
        let zb = &wb[1..];
        let na = crate::model::norm(za);
        let nb = crate::model::norm(zb);
        sup_a = sup_a.max((wa[0] - xav[0]).abs());
        sup_b = sup_b.max((wb[0] - xav[0]).abs());
        if t >= transient_a {
            dist_a = dist_a.max(bundle.att.dist(za));
        }
        if t >= transient_b {
            dist_b = dist_b.max(bundle.att.dist(zb));
        }
        fig1.push_str(&format!("{t},{},{},{}\n", wa[0], wb[0], xav[0]));
        fig2.push_str(&format!("{t},{na},{nb}\n"));
        ts.push(t);
        xs_a.push(wa[0]);
        xs_b.push(wb[0]);
        xs_av.push(xav[0]);
        zn_a.push(na);
        zn_b.push(nb);
    }

    let fig1_svg = LineChart {
        title: "Slow state against the reduced average solution".to_string(),
        x_label: "t".to_string(),
        y_label: "x(t)".to_string(),
        series: vec![
            Series {
                label: format!("x, eps = {}", cfg.eps_a),
                points: ts.iter().copied().zip(xs_a.iter().copied()).collect(),
            },
            Series {
                label: format!("x, eps = {}", cfg.eps_b),
                points: ts.iter().copied().zip(xs_b.iter().copied()).collect(),
            },
            Series {
                label: "x_av".to_string(),
                points: ts.iter().copied().zip(xs_av.iter().copied()).collect(),
            },
        ],
    }
    .render();
    let fig2_svg = LineChart {
        title: "Fast-state norm".to_string(),
        x_label: "t".to_string(),
        y_label: "||z(t)||".to_string(),
        series: vec![
            Series {
                label: format!("||z||, eps = {}", cfg.eps_a),
                points: ts.iter().copied().zip(zn_a.iter().copied()).collect(),
            },
            Series {
                label: format!("||z||, eps = {}", cfg.eps_b),
                points: ts.iter().copied().zip(zn_b.iter().copied()).collect(),
            },
        ],
    }
    .render();

    Ok(FiguresOutput {
        fig1_csv: fig1,
        fig2_csv: fig2,
        fig1_svg,
        fig2_svg,
        sup_diff_a: sup_a,
        sup_diff_b: sup_b,
        max_dist_after_transient_a: dist_a,
        max_dist_after_transient_b: dist_b,
        transient_a,
        transient_b,
    })
}

/// Writes the four figure files into `dir`.
pub fn write_figures(out: &FiguresOutput, dir: &Path) -> Result<(), ExperimentsError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("fig1.csv"), &out.fig1_csv)?;
    std::fs::write(dir.join("fig2.csv"), &out.fig2_csv)?;
    std::fs::write(dir.join("fig1.svg"), &out.fig1_svg)?;
    std::fs::write(dir.join("fig2.svg"), &out.fig2_svg)?;
    Ok(())
}
