//! Sampling-based estimation of the analysis constants: the Lipschitz
//! constant `L`, the field bound `P`, the average-field Lipschitz
//! constant `L_av`, and the boundary-layer decay pair `(r_y, beta_y)`.
//!
//! Sampled suprema are lower bounds on the true constants; each
//! estimate records its safety factor and the sampling is seeded so
//! estimates reproduce bit for bit.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::{AveragingError, build_fav_field};
use crate::bounds::ConstantSet;
use crate::integrate::{FullRun, IntegrateError, IntegratorConfig, Trajectory, integrate_boundary_layer};
use crate::model::{AttractorSpec, DomainSpec, SystemBundle, SystemSpec};

pub const LIPSCHITZ_SAFETY: f64 = 1.2;
pub const BOUND_SAFETY: f64 = 1.1;
/// Distances below this are dropped from decay fits (log window floor).
pub const DECAY_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error("run {index} does not decay exponentially (fitted rate {rate}); exponential convergence assumption violated")]
    NonDecaying { index: usize, rate: f64 },
    #[error("could not draw an admissible sample after {attempts} attempts")]
    SamplingStalled { attempts: usize },
    #[error("{0}")]
    BadInput(String),
}

/// A sampled supremum with its recorded safety factor:
/// `value = raw * safety`.
#[derive(Clone, Copy, Debug)]
pub struct SampledEstimate {
    pub value: f64,
    pub raw: f64,
    pub safety: f64,
    pub n_samples: usize,
}

fn draw_point<R: Rng>(
    sys: &SystemSpec,
    dom: &DomainSpec,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, f64), EstimateError> {
    for _ in 0..10_000 {
        let x = dom.sample_slow(rng, sys.n);
        let z = dom.sample_fast(rng);
        let eps = rng.gen_range(0.0..=dom.eps1);
        if sys.check_excluded(&z).is_ok() {
            return Ok((x, z, eps));
        }
    }
    Err(EstimateError::SamplingStalled { attempts: 10_000 })
}

/// Perturbs a point by at most `radius` in the joint (x, z, eps) space,
/// redrawing until the result is admissible.
fn draw_nearby<R: Rng>(
    sys: &SystemSpec,
    dom: &DomainSpec,
    base: (&[f64], &[f64], f64),
    radius: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, f64), EstimateError> {
    let (bx, bz, be) = base;
    let d = bx.len() + bz.len() + 1;
    for _ in 0..10_000 {
        let scale = radius * rng.gen::<f64>();
        let mut dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm < 1e-12 {
            continue;
        }
        for v in dir.iter_mut() {
            *v *= scale / nrm;
        }
        let x: Vec<f64> = bx.iter().zip(&dir[..bx.len()]).map(|(a, b)| a + b).collect();
        let z: Vec<f64> =
            bz.iter().zip(&dir[bx.len()..bx.len() + bz.len()]).map(|(a, b)| a + b).collect();
        let eps = be + dir[d - 1];
        if eps >= 0.0
            && eps <= dom.eps1
            && dom.contains_slow(&x)
            && dom.contains_fast(&z)
            && sys.check_excluded(&z).is_ok()
        {
            return Ok((x, z, eps));
        }
    }
    Err(EstimateError::SamplingStalled { attempts: 10_000 })
}

/// Estimates the joint Lipschitz constant of `f` and `g` over
/// `B_R(0) x M x [0, eps1]` from difference quotients. Pairs alternate
/// between independent draws and locally clustered ones (separation at
/// most `1e-3`) so local slopes are seen.
pub fn estimate_lipschitz<R: Rng>(
    sys: &SystemSpec,
    dom: &DomainSpec,
    n_pairs: usize,
    rng: &mut R,
) -> Result<SampledEstimate, EstimateError> {
    if n_pairs < 100 {
        return Err(EstimateError::BadInput(format!("need at least 100 pairs, got {n_pairs}")));
    }
    let mut fa = vec![0.0; sys.n];
    let mut fb = vec![0.0; sys.n];
    let mut ga = vec![0.0; sys.m];
    let mut gb = vec![0.0; sys.m];
    let mut raw = 0.0f64;
    for pair_idx in 0..n_pairs {
        let (xa, za, ea) = draw_point(sys, dom, rng)?;
        let (xb, zb, eb) = if pair_idx % 2 == 0 {
            draw_point(sys, dom, rng)?
        } else {
            draw_nearby(sys, dom, (&xa, &za, ea), 1e-3, rng)?
        };
        let mut dist_sq = (ea - eb) * (ea - eb);
        for (p, q) in xa.iter().zip(xb.iter()).chain(za.iter().zip(zb.iter())) {
            dist_sq += (p - q) * (p - q);
        }
        if dist_sq == 0.0 {
            continue;
        }
        let dist = dist_sq.sqrt();
        (sys.f)(&xa, &za, ea, &mut fa);
        (sys.f)(&xb, &zb, eb, &mut fb);
        (sys.g)(&xa, &za, ea, &mut ga);
        (sys.g)(&xb, &zb, eb, &mut gb);
        let df = fa.iter().zip(fb.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let dg = ga.iter().zip(gb.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        raw = raw.max(df / dist).max(dg / dist);
    }
    Ok(SampledEstimate { value: raw * LIPSCHITZ_SAFETY, raw, safety: LIPSCHITZ_SAFETY, n_samples: n_pairs })
}

/// Estimates the uniform bound `P` on `||f||` and `||g||`.
pub fn estimate_bound_p<R: Rng>(
    sys: &SystemSpec,
    dom: &DomainSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<SampledEstimate, EstimateError> {
    if n_samples < 1000 {
        return Err(EstimateError::BadInput(format!("need at least 1000 samples, got {n_samples}")));
    }
    let mut fv = vec![0.0; sys.n];
    let mut gv = vec![0.0; sys.m];
    let mut raw = 0.0f64;
    for _ in 0..n_samples {
        let (x, z, eps) = draw_point(sys, dom, rng)?;
        (sys.f)(&x, &z, eps, &mut fv);
        (sys.g)(&x, &z, eps, &mut gv);
        let nf = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = gv.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw = raw.max(nf).max(ng);
    }
    Ok(SampledEstimate { value: raw * BOUND_SAFETY, raw, safety: BOUND_SAFETY, n_samples })
}

/// Estimates the Lipschitz constant of an average field over `B_R(0)`.
pub fn estimate_lav<F, R: Rng>(
    mut f_av: F,
    slow_radius: f64,
    n_dim: usize,
    n_pairs: usize,
    rng: &mut R,
) -> Result<SampledEstimate, EstimateError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), EstimateError>,
{
    if n_pairs < 100 {
        return Err(EstimateError::BadInput(format!("need at least 100 pairs, got {n_pairs}")));
    }
    let dom = DomainSpec {
        slow_radius,
        fast_set: crate::model::FastSet::Box { lo: vec![0.0], hi: vec![1.0] },
        eps1: 1.0,
    };
    let mut va = vec![0.0; n_dim];
    let mut vb = vec![0.0; n_dim];
    let mut raw = 0.0f64;
    for pair_idx in 0..n_pairs {
        let xa = dom.sample_slow(rng, n_dim);
        let xb = if pair_idx % 2 == 0 {
            dom.sample_slow(rng, n_dim)
        } else {
            // Clustered draw directly on the ball.
            loop {
                let scale = 1e-3 * rng.gen::<f64>();
                let dir: Vec<f64> = (0..n_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm < 1e-12 {
                    continue;
                }
                let cand: Vec<f64> =
                    xa.iter().zip(dir.iter()).map(|(a, b)| a + b * scale / nrm).collect();
                if dom.contains_slow(&cand) {
                    break cand;
                }
            }
        };
        let dist = xa.iter().zip(xb.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        f_av(&xa, &mut va)?;
        f_av(&xb, &mut vb)?;
        let dv = va.iter().zip(vb.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        raw = raw.max(dv / dist);
    }
    Ok(SampledEstimate { value: raw * LIPSCHITZ_SAFETY, raw, safety: LIPSCHITZ_SAFETY, n_samples: n_pairs })
}

/// Per-run least-squares diagnostics of the decay fit.
#[derive(Clone, Copy, Debug)]
pub struct RunFit {
    /// Fitted slope of `ln(dist/dist0)` against `tau` (negative).
    pub slope: f64,
    pub intercept: f64,
    pub rms: f64,
    pub n_samples: usize,
}

/// Envelope fit of `dist(tau) <= r_y e^{-beta_y tau} dist(0)`.
#[derive(Clone, Debug)]
pub struct DecayFit {
    pub r_y: f64,
    pub beta_y: f64,
    pub runs: Vec<RunFit>,
}

/// Fits the exponential decay constants from boundary-layer runs. The
/// decay rate is the slowest fitted rate across runs; the overshoot is
/// then inflated until every sample sits under the envelope, and clamped
/// to at least 1 (the envelope at `tau = 0` cannot undershoot).
pub fn fit_exponential_decay(
    runs: &[Trajectory],
    att: &AttractorSpec,
) -> Result<DecayFit, EstimateError> {
    if runs.len() < 3 {
        return Err(EstimateError::BadInput(format!("need at least 3 runs, got {}", runs.len())));
    }
    let mut fits = Vec::with_capacity(runs.len());
    let mut windows: Vec<Vec<(f64, f64)>> = Vec::with_capacity(runs.len());
    for (index, run) in runs.iter().enumerate() {
        let t0 = run.times[0];
        let d0 = att.dist(&run.states[0]);
        if !(d0 > 0.0) {
            return Err(EstimateError::BadInput(format!(
                "run {index} starts on the attractor; decay fit needs dist(0) > 0"
            )));
        }
        // All retained samples, normalized by the start distance. The
        // slope fit excludes the start itself: the overshoot r_y is the
        // departure of the later samples' envelope from that anchor.
        let pts: Vec<(f64, f64)> = run
            .times
            .iter()
            .zip(run.states.iter())
            .filter_map(|(t, s)| {
                let d = att.dist(s);
                (d >= DECAY_FLOOR).then(|| (*t - t0, (d / d0).ln()))
            })
            .collect();
        let fit_pts: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.0 > 0.0).collect();
        if fit_pts.len() < 2 {
            return Err(EstimateError::BadInput(format!("run {index} has too few usable samples")));
        }
        let n = fit_pts.len() as f64;
        let sx: f64 = fit_pts.iter().map(|p| p.0).sum();
        let sy: f64 = fit_pts.iter().map(|p| p.1).sum();
        let sxx: f64 = fit_pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = fit_pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        let slope = (n * sxy - sx * sy) / denom;
        let intercept = (sy - slope * sx) / n;
        if slope >= 0.0 {
            return Err(EstimateError::NonDecaying { index, rate: -slope });
        }
        let rms = (fit_pts
            .iter()
            .map(|(t, y)| {
                let r = y - (intercept + slope * t);
                r * r
            })
            .sum::<f64>()
            / n)
            .sqrt();
        fits.push(RunFit { slope, intercept, rms, n_samples: fit_pts.len() });
        windows.push(pts);
    }
    let beta_y = fits.iter().map(|f| -f.slope).fold(f64::INFINITY, f64::min);
    // Inflate the overshoot so dist(tau) <= r_y e^{-beta_y tau} dist(0)
    // holds at every retained sample.
    let mut r_y = 1.0f64;
    for pts in &windows {
        for (t, y) in pts {
            r_y = r_y.max((y + beta_y * t).exp());
        }
    }
    Ok(DecayFit { r_y, beta_y, runs: fits })
}

/// First slow time at which the run leaves `B_R(0) x M`, if any.
pub fn first_domain_exit(run: &FullRun, dom: &DomainSpec) -> Option<f64> {
    let slack = 1e-9;
    for i in 0..run.sol.n_nodes() {
        let w = run.sol.state_at_node(i);
        let x = &w[..run.n];
        let z = &w[run.n..];
        let x_ok = crate::model::norm(x) <= dom.slow_radius * (1.0 + slack);
        let z_ok = dom.contains_fast(z) || {
            // Allow boundary grazing within the same slack.
            match &dom.fast_set {
                crate::model::FastSet::Annulus { center, inner, outer } => {
                    let r = crate::model::dist_euclid(z, center);
                    r >= inner * (1.0 - slack) && r <= outer * (1.0 + slack)
                }
                crate::model::FastSet::Box { .. } => false,
            }
        };
        if !x_ok || !z_ok {
            return Some(run.eps * run.sol.times()[i]);
        }
    }
    None
}

/// Estimation settings for a full constant-set build.
#[derive(Clone, Copy, Debug)]
pub struct EstimateOptions {
    pub n_pairs: usize,
    pub n_samples: usize,
    /// Averaging horizon for the numeric `L_av` fallback.
    pub t_av: f64,
    /// Fast-time length of decay-fit runs.
    pub decay_tau: f64,
    pub seed: u64,
    pub horizon: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            n_pairs: 10_000,
            n_samples: 10_000,
            t_av: 500.0,
            decay_tau: 12.0,
            seed: 42,
            horizon: 10.0,
        }
    }
}

/// Full constant-set estimate with per-constant safety metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantSetFile {
    pub seed: u64,
    pub l: f64,
    pub p: f64,
    pub l_av: f64,
    pub r: f64,
    pub z_bar: f64,
    pub horizon: f64,
    pub r_y: f64,
    pub beta_y: f64,
    pub delta_y: Option<f64>,
    pub safety_l: f64,
    pub safety_p: f64,
    pub safety_l_av: f64,
}

impl ConstantSetFile {
    pub fn to_constant_set(&self) -> ConstantSet {
        let mut c = ConstantSet::new(
            self.l,
            self.p,
            self.l_av,
            self.r,
            self.z_bar,
            self.horizon,
            self.r_y,
            self.beta_y,
        );
        if let Some(dy) = self.delta_y {
            c = c.with_delta_y(dy);
        }
        c
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("constant set serializes")
    }

    pub fn load(path: &Path) -> Result<Self, EstimateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EstimateError::BadInput(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| EstimateError::BadInput(format!("parsing {}: {e}", path.display())))
    }
}

/// Runs every estimator against a registered system and assembles the
/// constant file consumed by the bounds evaluation and the CLI.
pub fn estimate_constant_set(
    bundle: &SystemBundle,
    opts: &EstimateOptions,
) -> Result<ConstantSetFile, EstimateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sys = &bundle.sys;
    let dom = &bundle.dom;
    let l = estimate_lipschitz(sys, dom, opts.n_pairs, &mut rng)?;
    let p = estimate_bound_p(sys, dom, opts.n_samples, &mut rng)?;

    let lav_pairs = if bundle.f_av_analytic.is_some() { opts.n_pairs } else { 100 };
    let l_av = match &bundle.f_av_analytic {
        Some(fav) => {
            let fav = fav.clone();
            estimate_lav(
                move |x: &[f64], out: &mut [f64]| {
                    fav(x, out);
                    Ok(())
                },
                dom.slow_radius,
                sys.n,
                lav_pairs,
                &mut rng,
            )?
        }
        None => {
            let z0_ref = dom.sample_fast(&mut rng);
            let cfg = IntegratorConfig::default();
            let field = build_fav_field(sys, &z0_ref, opts.t_av, &cfg);
            estimate_lav(
                move |x: &[f64], out: &mut [f64]| {
                    field.eval(x, out).map_err(EstimateError::from)
                },
                dom.slow_radius,
                sys.n,
                lav_pairs,
                &mut rng,
            )?
        }
    };

    // Decay fit from a handful of boundary-layer runs off the attractor.
    let cfg = IntegratorConfig { h_max: Some(0.05), ..Default::default() };
    let mut runs = Vec::new();
    let x_frozen = vec![0.0; sys.n];
    let mut guard = 0;
    while runs.len() < 4 {
        guard += 1;
        if guard > 100 {
            return Err(EstimateError::BadInput(
                "could not find fast initial conditions off the attractor".to_string(),
            ));
        }
        let z0 = dom.sample_fast(&mut rng);
        if bundle.att.dist(&z0) < 1e-3 {
            continue;
        }
        runs.push(integrate_boundary_layer(sys, &x_frozen, &z0, opts.decay_tau, &cfg)?);
    }
    let decay = fit_exponential_decay(&runs, &bundle.att)?;

    Ok(ConstantSetFile {
        seed: opts.seed,
        l: l.value,
        p: p.value,
        l_av: l_av.value,
        r: dom.slow_radius,
        z_bar: dom.fast_set.max_norm(),
        horizon: opts.horizon,
        r_y: decay.r_y,
        beta_y: decay.beta_y,
        delta_y: None,
        safety_l: l.safety,
        safety_p: p.safety,
        safety_l_av: l_av.safety,
    })
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::Clock;
    use crate::model::{FastSet, SystemSpec, VectorField, builtin_example, lookup_system};
    use std::sync::Arc;

    fn unit_ball_linear(scale: f64) -> (SystemSpec, DomainSpec) {
        let f: VectorField = Arc::new(move |x: &[f64], _z: &[f64], _e: f64, out: &mut [f64]| {
            out[0] = -scale * x[0];
        });
        let g: VectorField = Arc::new(|_x: &[f64], _z: &[f64], _e: f64, out: &mut [f64]| {
            out[0] = 0.0;
        });
        let sys = SystemSpec { name: "lin".into(), n: 1, m: 1, f, g, excluded: None };
        let dom = DomainSpec {
            slow_radius: 1.0,
            fast_set: FastSet::Box { lo: vec![-1.0], hi: vec![1.0] },
            eps1: 0.1,
        };
        (sys, dom)
    }

    #[test]
    fn lipschitz_of_linear_field() {
        let (sys, dom) = unit_ball_linear(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let est = estimate_lipschitz(&sys, &dom, 5_000, &mut rng).unwrap();
        assert!(est.raw <= 1.0 + 1e-12);
        assert!(est.value > 1.14 && est.value <= 1.2 + 1e-12, "value {}", est.value);
    }

    #[test]
    fn lipschitz_scales_with_field() {
        let (sys1, dom) = unit_ball_linear(1.0);
        let (sys3, _) = unit_ball_linear(3.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r3 = ChaCha8Rng::seed_from_u64(7);
        let e1 = estimate_lipschitz(&sys1, &dom, 2_000, &mut r1).unwrap();
        let e3 = estimate_lipschitz(&sys3, &dom, 2_000, &mut r3).unwrap();
        assert!((e3.value / e1.value - 3.0).abs() < 0.01);
    }

    #[test]
    fn lipschitz_monotone_under_more_samples() {
        let (sys, _, _) = builtin_example();
        let (_, dom, _) = builtin_example();
        let mut ra = ChaCha8Rng::seed_from_u64(11);
        let mut rb = ChaCha8Rng::seed_from_u64(11);
        let small = estimate_lipschitz(&sys, &dom, 1_000, &mut ra).unwrap();
        let large = estimate_lipschitz(&sys, &dom, 2_000, &mut rb).unwrap();
        // Same seed: the first 1000 pairs coincide, so the max can only grow.
        assert!(large.raw >= small.raw);
    }

    #[test]
    fn lipschitz_stabilizes_under_doubling() {
        let (sys, dom, _) = builtin_example();
        let mut ra = ChaCha8Rng::seed_from_u64(42);
        let mut rb = ChaCha8Rng::seed_from_u64(42);
        let a = estimate_lipschitz(&sys, &dom, 10_000, &mut ra).unwrap();
        let b = estimate_lipschitz(&sys, &dom, 20_000, &mut rb).unwrap();
        assert!((b.value - a.value).abs() <= 0.1 * a.value, "a={} b={}", a.value, b.value);
    }

    #[test]
    fn bound_p_of_linear_field() {
        let (sys, dom) = unit_ball_linear(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let est = estimate_bound_p(&sys, &dom, 5_000, &mut rng).unwrap();
        assert!(est.raw <= 1.0 + 1e-12);
        assert!(est.value > 1.04 && est.value <= 1.1 + 1e-12, "value {}", est.value);
    }

    #[test]
    fn bound_p_scales_with_field() {
        let (sys1, dom) = unit_ball_linear(1.0);
        let (sys2, _) = unit_ball_linear(2.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let e1 = estimate_bound_p(&sys1, &dom, 2_000, &mut r1).unwrap();
        let e2 = estimate_bound_p(&sys2, &dom, 2_000, &mut r2).unwrap();
        assert!((e2.value / e1.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bound_p_stable_on_example() {
        let (sys, dom, _) = builtin_example();
        let mut ra = ChaCha8Rng::seed_from_u64(42);
        let mut rb = ChaCha8Rng::seed_from_u64(42);
        let a = estimate_bound_p(&sys, &dom, 5_000, &mut ra).unwrap();
        let b = estimate_bound_p(&sys, &dom, 10_000, &mut rb).unwrap();
        assert!(a.value.is_finite());
        assert!((b.value - a.value).abs() <= 0.1 * a.value);
    }

    #[test]
    fn lav_of_analytic_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let est = estimate_lav(
            |x: &[f64], out: &mut [f64]| {
                out[0] = -x[0];
                Ok(())
            },
            2.5,
            1,
            2_000,
            &mut rng,
        )
        .unwrap();
        assert!((est.value - 1.2).abs() < 0.06, "value {}", est.value);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let zero = estimate_lav(
            |_x: &[f64], out: &mut [f64]| {
                out[0] = 4.0;
                Ok(())
            },
            2.5,
            1,
            500,
            &mut rng,
        )
        .unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn lav_numeric_field_close_to_analytic() {
        let (sys, _, _) = builtin_example();
        let cfg = IntegratorConfig::default();
        let field = build_fav_field(&sys, &[1.2, 0.0], 200.0, &cfg);
        let mut ra = ChaCha8Rng::seed_from_u64(3);
        let numeric = estimate_lav(
            |x: &[f64], out: &mut [f64]| field.eval(x, out).map_err(EstimateError::from),
            2.5,
            1,
            100,
            &mut ra,
        )
        .unwrap();
        let mut rb = ChaCha8Rng::seed_from_u64(3);
        let analytic = estimate_lav(
            |x: &[f64], out: &mut [f64]| {
                out[0] = -x[0];
                Ok(())
            },
            2.5,
            1,
            100,
            &mut rb,
        )
        .unwrap();
        let rel = (numeric.value - analytic.value).abs() / analytic.value;
        assert!(rel < 0.05, "numeric {} analytic {}", numeric.value, analytic.value);
    }

    #[test]
    fn decay_fit_recovers_example_constants() {
        // Fit over [0, 5] where the distances stay far above the
        // integrator noise floor, so the log-residuals are clean.
        let (sys, _, att) = builtin_example();
        let cfg = IntegratorConfig {
            rel_tol: 1e-11,
            abs_tol: 1e-13,
            h_max: Some(0.02),
            ..Default::default()
        };
        let runs: Vec<Trajectory> = [[0.5, 0.0], [0.0, 1.2], [1.5, 0.0]]
            .iter()
            .map(|z0| integrate_boundary_layer(&sys, &[0.0], z0, 5.0, &cfg).unwrap())
            .collect();
        let fit = fit_exponential_decay(&runs, &att).unwrap();
        assert!((fit.beta_y - 1.0).abs() < 0.01, "beta {}", fit.beta_y);
        assert!((fit.r_y - 1.0).abs() < 0.01, "r {}", fit.r_y);
        for run in &fit.runs {
            assert!(run.rms < 1e-6, "rms {}", run.rms);
        }
    }

    #[test]
    fn decay_fit_exact_on_synthetic_log_linear_data() {
        // dist(tau) = 2 e^{-3 tau} dist(0) for tau > 0, anchored at
        // dist(0) itself; the fit recovers r_y = 2, beta_y = 3 exactly.
        let att = AttractorSpec { dist: Arc::new(|z: &[f64]| z[0].abs()), description: "origin".into() };
        let d0 = 0.4;
        let mk = || {
            let times: Vec<f64> = (0..=60).map(|i| i as f64 * 0.1).collect();
            let states: Vec<Vec<f64>> = times
                .iter()
                .map(|t| if *t == 0.0 { vec![d0] } else { vec![2.0 * d0 * (-3.0 * t).exp()] })
                .collect();
            Trajectory { clock: Clock::FastTime, times, states }
        };
        let runs = vec![mk(), mk(), mk()];
        let fit = fit_exponential_decay(&runs, &att).unwrap();
        assert!((fit.beta_y - 3.0).abs() < 1e-9, "beta {}", fit.beta_y);
        assert!((fit.r_y - 2.0).abs() < 1e-9, "r {}", fit.r_y);
    }

    #[test]
    fn decay_fit_envelope_covers_every_sample() {
        let (sys, _, att) = builtin_example();
        let cfg = IntegratorConfig { h_max: Some(0.05), ..Default::default() };
        let runs: Vec<Trajectory> = [[0.5, 0.0], [0.0, 1.3], [1.4, 0.3]]
            .iter()
            .map(|z0| integrate_boundary_layer(&sys, &[0.5], z0, 12.0, &cfg).unwrap())
            .collect();
        let fit = fit_exponential_decay(&runs, &att).unwrap();
        for run in &runs {
            let d0 = att.dist(&run.states[0]);
            for (t, s) in run.times.iter().zip(run.states.iter()) {
                let d = att.dist(s);
                if d >= DECAY_FLOOR {
                    assert!(d <= fit.r_y * (-fit.beta_y * t).exp() * d0 * (1.0 + 1e-6));
                }
            }
        }
    }

    #[test]
    fn decay_fit_rejects_growth() {
        let att = AttractorSpec { dist: Arc::new(|z: &[f64]| z[0].abs()), description: "origin".into() };
        let mk = |rate: f64| {
            let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
            let states: Vec<Vec<f64>> = times.iter().map(|t| vec![0.5 * (rate * t).exp()]).collect();
            Trajectory { clock: Clock::FastTime, times, states }
        };
        let runs = vec![mk(-1.0), mk(0.5), mk(-1.0)];
        let err = fit_exponential_decay(&runs, &att).unwrap_err();
        assert!(matches!(err, EstimateError::NonDecaying { index: 1, .. }));
    }

    #[test]
    fn constant_set_file_round_trips_toml() {
        let bundle = lookup_system("linear").unwrap();
        let opts = EstimateOptions {
            n_pairs: 200,
            n_samples: 1000,
            decay_tau: 10.0,
            ..Default::default()
        };
        let file = estimate_constant_set(&bundle, &opts).unwrap();
        let text = file.to_toml_string();
        let back: ConstantSetFile = toml::from_str(&text).unwrap();
        assert_eq!(back.l, file.l);
        assert_eq!(back.seed, 42);
        let c = back.to_constant_set();
        c.validate().unwrap();
        assert!((c.delta_y - c.beta_y / 2.0).abs() < 1e-12);
    }
}
