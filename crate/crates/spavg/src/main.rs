//! Command-line front end: simulate, average, grid, bounds, sweep,
//! figures, estimate. Exit codes: 0 success, 1 domain or assumption
//! failure at run time, 2 configuration errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spavg::averaging::{self, GammaEnvelope};
use spavg::bounds::{self, ConstantSet};
use spavg::config::FileConfig;
use spavg::constants::{self, ConstantSetFile, EstimateOptions};
use spavg::experiments::{
    self, FiguresConfig, FitColumn, SweepConfig, TimingMode, write_figures,
};
use spavg::integrate::{
    integrate_boundary_layer, integrate_full, integrate_reduced,
};
use spavg::model::{SystemBundle, lookup_system};
use spavg::scheme;

#[derive(Parser)]
#[command(name = "spavg", version, about = "Two-time-scale simulation and averaging analysis")]
struct Cli {
    /// TOML config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for stochastic estimators (default 42, echoed in outputs).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Registered system identifier.
    #[arg(long, global = true)]
    system: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one system variant and write the trajectory CSV.
    Simulate {
        /// Which system to integrate: full, boundary, or reduced.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        eps: Option<f64>,
        /// Slow-time horizon (full/reduced).
        #[arg(long)]
        horizon: Option<f64>,
        /// Fast-time horizon (boundary).
        #[arg(long)]
        tau_end: Option<f64>,
        /// Comma-separated initial slow state.
        #[arg(long)]
        x0: Option<String>,
        /// Comma-separated initial fast state.
        #[arg(long)]
        z0: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average field at configured points plus the gamma envelope.
    Average {
        #[arg(long)]
        t_av: Option<f64>,
        #[arg(long)]
        out_fav: PathBuf,
        #[arg(long)]
        out_gamma: PathBuf,
    },
    /// Solve S_eps and print the interval grid.
    Grid {
        #[arg(long)]
        eps: f64,
        #[arg(long = "L")]
        lip: Option<f64>,
        #[arg(long = "T")]
        horizon: Option<f64>,
    },
    /// Bound report over an epsilon grid.
    Bounds {
        /// Constant-set file from `estimate` (overrides [constants]).
        #[arg(long)]
        constants: Option<PathBuf>,
        /// Comma-separated epsilon values.
        #[arg(long)]
        eps_list: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closeness sweep with an order fit.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        /// Zero the wall_ms column for bit-reproducible records.
        #[arg(long)]
        no_timing: bool,
    },
    /// Reproduce the demonstration figure datasets and plots.
    Figures {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the analysis constants and write the constant file.
    Estimate {
        #[arg(long)]
        out: PathBuf,
    },
}

enum AppError {
    Config(String),
    Run(String),
}

impl AppError {
    fn config<E: std::fmt::Display>(e: E) -> Self {
        AppError::Config(e.to_string())
    }

    fn run<E: std::fmt::Display>(e: E) -> Self {
        AppError::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut cfg = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(AppError::Config)?,
        None => FileConfig::default(),
    };
    if let Some(name) = &cli.system {
        cfg.system.name = name.clone();
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(42);
    let bundle = lookup_system(&cfg.system.name)
        .ok_or_else(|| AppError::Config(format!("unknown system '{}'", cfg.system.name)))?;
    let integ = cfg.integrator.to_integrator_config().map_err(AppError::Config)?;

    match cli.cmd {
        Cmd::Simulate { kind, eps, horizon, tau_end, x0, z0, out } => {
            let x0 = match x0 {
                Some(s) => parse_vec(&s).map_err(AppError::Config)?,
                None => cfg.sweep.x0.clone(),
            };
            let z0 = match z0 {
                Some(s) => parse_vec(&s).map_err(AppError::Config)?,
                None => cfg.sweep.z0.clone(),
            };
            let horizon = horizon.unwrap_or(cfg.sweep.horizon);
            let traj_csv = match kind.as_str() {
                "full" => {
                    let eps = eps.ok_or_else(|| AppError::Config("--eps required for kind=full".into()))?;
                    if !(eps > 0.0 && eps <= bundle.dom.eps1) {
                        return Err(AppError::Run(format!(
                            "eps {eps} outside the admissible range (0, {}]",
                            bundle.dom.eps1
                        )));
                    }
                    let (xt, zt) = integrate_full(&bundle.sys, &x0, &z0, eps, horizon, &integ)
                        .map_err(AppError::run)?;
                    // Shared grid: interleave x and z columns in one CSV.
                    let mut buf = String::new();
                    buf.push_str("clock,t");
                    for j in 0..bundle.sys.n {
                        let _ = write!(buf, ",x_{j}");
                    }
                    for j in 0..bundle.sys.m {
                        let _ = write!(buf, ",z_{j}");
                    }
                    buf.push('\n');
                    for i in 0..xt.len() {
                        let _ = write!(buf, "{},{}", xt.clock, xt.times[i]);
                        for v in &xt.states[i] {
                            let _ = write!(buf, ",{v}");
                        }
                        for v in &zt.states[i] {
                            let _ = write!(buf, ",{v}");
                        }
                        buf.push('\n');
                    }
                    buf
                }
                "boundary" => {
                    let tau_end = tau_end.unwrap_or(10.0);
                    let traj =
                        integrate_boundary_layer(&bundle.sys, &x0, &z0, tau_end, &integ)
                            .map_err(AppError::run)?;
                    traj.to_csv_string()
                }
                "reduced" => {
                    let traj = match &bundle.f_av_analytic {
                        Some(fav) => {
                            let fav = fav.clone();
                            integrate_reduced(
                                move |x: &[f64], outv: &mut [f64]| {
                                    fav(x, outv);
                                    Ok(())
                                },
                                &x0,
                                horizon,
                                &integ,
                            )
                            .map_err(AppError::run)?
                        }
                        None => {
                            let field = averaging::build_fav_field(
                                &bundle.sys,
                                &z0,
                                cfg.sweep.t_av,
                                &integ,
                            );
                            integrate_reduced(
                                |x: &[f64], outv: &mut [f64]| {
                                    field.eval(x, outv).map_err(|e| {
                                        spavg::integrate::IntegrateError::BadInput(e.to_string())
                                    })
                                },
                                &x0,
                                horizon,
                                &integ,
                            )
                            .map_err(AppError::run)?
                        }
                    };
                    traj.to_csv_string()
                }
                other => {
                    return Err(AppError::Config(format!(
                        "unknown kind '{other}' (expected full, boundary, or reduced)"
                    )));
                }
            };
            std::fs::write(&out, traj_csv).map_err(AppError::run)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Average { t_av, out_fav, out_gamma } => {
            let t_av = t_av.unwrap_or(cfg.average.t_av);
            let mut fav_csv = format!("# seed={seed}\n");
            let n = bundle.sys.n;
            if n != 1 {
                return Err(AppError::Config(
                    "the average table expects a scalar slow state".into(),
                ));
            }
            fav_csv.push_str("x,f_av,cauchy_gap\n");
            for &x in &cfg.average.x_points {
                let res = averaging::compute_fav(&bundle.sys, &[x], &cfg.average.z0, t_av, &integ)
                    .map_err(AppError::run)?;
                let _ = writeln!(fav_csv, "{x},{},{}", res.f_av[0], res.cauchy_gap);
            }
            std::fs::write(&out_fav, fav_csv).map_err(AppError::run)?;

            let env = estimate_envelope(&bundle, &cfg, t_av, &integ)?;
            let mut gamma_csv = format!("# seed={seed}\n");
            let mut buf = Vec::new();
            env.write_csv(&mut buf).map_err(AppError::run)?;
            gamma_csv.push_str(&String::from_utf8(buf).expect("csv utf-8"));
            std::fs::write(&out_gamma, gamma_csv).map_err(AppError::run)?;
            println!("wrote {} and {}", out_fav.display(), out_gamma.display());
            Ok(())
        }

        Cmd::Grid { eps, lip, horizon } => {
            let c = resolve_constants(&cfg, None)?;
            let lip = lip.unwrap_or(c.l);
            let horizon = horizon.unwrap_or(c.horizon);
            let s_eps = scheme::solve_seps(lip, horizon, eps).map_err(AppError::run)?;
            let grid = scheme::build_time_grid(eps, s_eps, horizon).map_err(AppError::run)?;
            // The table can be long; tolerate a reader that stops early.
            print_ignoring_closed_pipe(|w| {
                writeln!(w, "S_eps = {s_eps}")?;
                writeln!(w, "residual = {}", scheme::seps_residual_rel(lip, horizon, eps, s_eps))?;
                writeln!(w, "intervals = {}", grid.num_intervals())?;
                if grid.degenerate {
                    writeln!(w, "degenerate = true")?;
                }
                writeln!(w, "l,t_l")?;
                for (l, t) in grid.t_grid.iter().enumerate() {
                    writeln!(w, "{l},{t}")?;
                }
                Ok(())
            })
        }

        Cmd::Bounds { constants: cfile, eps_list, out } => {
            let c = resolve_constants(&cfg, cfile.as_deref())?;
            let eps_grid = match eps_list {
                Some(s) => parse_vec(&s).map_err(AppError::Config)?,
                None => cfg.bounds.eps_list.clone(),
            };
            let gamma = resolve_gamma(&bundle, &cfg)?;
            let rows = bounds::bound_report(&c, |s| gamma(s), &eps_grid).map_err(AppError::run)?;
            let mut buf = Vec::new();
            bounds::write_bound_report_csv(&rows, &mut buf).map_err(AppError::run)?;
            std::fs::write(&out, buf).map_err(AppError::run)?;
            println!("wrote {} ({} rows)", out.display(), rows.len());
            Ok(())
        }

        Cmd::Sweep { out, no_timing } => {
            let c = resolve_constants(&cfg, None)?;
            let sweep_cfg = SweepConfig {
                x0: cfg.sweep.x0.clone(),
                z0: cfg.sweep.z0.clone(),
                horizon: cfg.sweep.horizon,
                t_a: cfg.sweep.t_a,
                eps_list: cfg.sweep.eps_list.clone(),
                grid_points: cfg.sweep.grid_points,
                integ,
                t_av: cfg.sweep.t_av,
            };
            let gamma = resolve_gamma(&bundle, &cfg)?;
            let result = experiments::closeness_sweep(&bundle, &sweep_cfg, &c, |s| gamma(s))
                .map_err(AppError::run)?;
            let timing = if no_timing { TimingMode::Zeroed } else { TimingMode::Real };
            let mut buf = Vec::new();
            experiments::write_sweep_csv(&result, timing, Some(seed), &mut buf)
                .map_err(AppError::run)?;
            std::fs::write(&out, buf).map_err(AppError::run)?;
            let fit = experiments::fit_order(&result, FitColumn::SupXErr).map_err(AppError::run)?;
            println!("wrote {}", out.display());
            println!(
                "fitted slope = {} (r2 = {}), order >= 0.5: {}",
                fit.slope,
                fit.r2,
                if fit.order_at_least_half() { "PASS" } else { "FAIL" }
            );
            Ok(())
        }

        Cmd::Figures { out } => {
            let fig_cfg = FiguresConfig {
                horizon: cfg.sweep.horizon,
                x0: cfg.sweep.x0.clone(),
                z0: cfg.sweep.z0.clone(),
                integ,
                ..Default::default()
            };
            let figs = experiments::reproduce_figures(&bundle, &fig_cfg).map_err(AppError::run)?;
            write_figures(&figs, &out).map_err(AppError::run)?;
            println!("wrote fig1.csv, fig2.csv, fig1.svg, fig2.svg under {}", out.display());
            println!(
                "sup|x - x_av|: eps={} -> {}, eps={} -> {}",
                fig_cfg.eps_a, figs.sup_diff_a, fig_cfg.eps_b, figs.sup_diff_b
            );
            Ok(())
        }

        Cmd::Estimate { out } => {
            let opts = EstimateOptions {
                n_pairs: cfg.estimate.n_pairs,
                n_samples: cfg.estimate.n_samples,
                t_av: cfg.estimate.t_av,
                decay_tau: cfg.estimate.decay_tau,
                seed,
                horizon: cfg.sweep.horizon,
            };
            let file = constants::estimate_constant_set(&bundle, &opts).map_err(AppError::run)?;
            std::fs::write(&out, file.to_toml_string()).map_err(AppError::run)?;
            println!("wrote {}", out.display());
            println!("L = {}, P = {}, L_av = {}, r_y = {}, beta_y = {}", file.l, file.p, file.l_av, file.r_y, file.beta_y);
            Ok(())
        }
    }
}

fn print_ignoring_closed_pipe<F>(emit: F) -> Result<(), AppError>
where
    F: FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>,
{
    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    match emit(&mut w).and_then(|()| std::io::Write::flush(&mut w)) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(AppError::run(e)),
    }
}

fn parse_vec(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("parsing '{p}': {e}")))
        .collect()
}

fn resolve_constants(cfg: &FileConfig, flag_path: Option<&Path>) -> Result<ConstantSet, AppError> {
    let path = flag_path
        .map(|p| p.to_path_buf())
        .or_else(|| cfg.constants.file.as_ref().map(PathBuf::from));
    let c = match path {
        Some(p) => ConstantSetFile::load(&p).map_err(AppError::config)?.to_constant_set(),
        None => cfg.constants.to_constant_set(),
    };
    c.validate().map_err(AppError::config)?;
    Ok(c)
}

/// Envelope value at arbitrary `s`: analytic when the system carries
/// one, else interpolated from a measured-envelope CSV.
fn resolve_gamma(
    bundle: &SystemBundle,
    cfg: &FileConfig,
) -> Result<Box<dyn Fn(f64) -> f64>, AppError> {
    if let Some(path) = &cfg.bounds.envelope_file {
        let env = load_envelope_csv(Path::new(path)).map_err(AppError::Config)?;
        return Ok(Box::new(move |s| env.interp_clamped(s)));
    }
    match &bundle.gamma_analytic {
        Some(g) => {
            let g = g.clone();
            Ok(Box::new(move |s| g(s)))
        }
        None => Err(AppError::Config(
            "system has no analytic envelope; set [bounds] envelope_file".to_string(),
        )),
    }
}

fn load_envelope_csv(path: &Path) -> Result<GammaEnvelope, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let mut s_grid = Vec::new();
    let mut gamma_hat = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("s,") {
            continue;
        }
        let mut parts = line.split(',');
        let s: f64 = parts
            .next()
            .ok_or("missing s column")?
            .parse()
            .map_err(|e| format!("bad s value: {e}"))?;
        let g: f64 = parts
            .next()
            .ok_or("missing gamma_hat column")?
            .parse()
            .map_err(|e| format!("bad gamma_hat value: {e}"))?;
        s_grid.push(s);
        gamma_hat.push(g);
    }
    if s_grid.len() < 2 {
        return Err("envelope file needs at least two rows".to_string());
    }
    Ok(GammaEnvelope { s_star: s_grid[0], s_grid, gamma_hat })
}

fn estimate_envelope(
    bundle: &SystemBundle,
    cfg: &FileConfig,
    t_av: f64,
    integ: &spavg::integrate::IntegratorConfig,
) -> Result<GammaEnvelope, AppError> {
    let xs: Vec<Vec<f64>> = cfg.average.gamma_x_samples.iter().map(|&x| vec![x]).collect();
    if bundle.sys.n != 1 {
        return Err(AppError::Config("gamma estimation here expects a scalar slow state".into()));
    }
    match &bundle.f_av_analytic {
        Some(fav) => {
            let fav = fav.clone();
            averaging::estimate_gamma(
                &bundle.sys,
                move |x: &[f64], out: &mut [f64]| fav(x, out),
                &xs,
                &cfg.average.gamma_z0_samples,
                &cfg.average.s_grid,
                &cfg.average.tau_primes,
                integ,
            )
            .map_err(AppError::run)
        }
        None => {
            let field = averaging::build_fav_field(&bundle.sys, &cfg.average.z0, t_av, integ);
            let sys = &bundle.sys;
            averaging::estimate_gamma(
                sys,
                move |x: &[f64], out: &mut [f64]| {
                    field.eval(x, out).expect("average field evaluation failed");
                },
                &xs,
                &cfg.average.gamma_z0_samples,
                &cfg.average.s_grid,
                &cfg.average.tau_primes,
                integ,
            )
            .map_err(AppError::run)
        }
    }
}
