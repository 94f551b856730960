//! System definitions: slow/fast vector fields, domain sets, attractor
//! distance functions, and the built-in demonstration systems.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

/// Shared evaluable vector field `(x, z, eps) -> out`.
pub type VectorField = Arc<dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync>;

/// Point-to-set distance function on the fast space.
pub type DistanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Vector field of a reduced (slow-only) system, `x -> out`.
pub type SlowField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("point {point:?} lies in the excluded region ({description}) at evaluation")]
    ExcludedRegion { point: Vec<f64>, description: String },
    #[error("vector field returned a non-finite value at x={x:?}, z={z:?}, eps={eps}")]
    NonFinite { x: Vec<f64>, z: Vec<f64>, eps: f64 },
    #[error("{0}")]
    BadInput(String),
}

/// Region of the fast space where `g` is undefined. Integrators abort
/// when a step lands within `clearance` of it.
#[derive(Clone)]
pub struct ExcludedRegion {
    pub contains: Arc<dyn Fn(&[f64]) -> bool + Send + Sync>,
    pub clearance: f64,
    pub description: String,
}

impl fmt::Debug for ExcludedRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExcludedRegion")
            .field("clearance", &self.clearance)
            .field("description", &self.description)
            .finish()
    }
}

/// A singularly perturbed system: slow field `f`, fast field `g`, with
/// dimensions `n` and `m`. Evaluation is pure and deterministic; the
/// same inputs give bitwise-identical outputs.
#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    /// Slow dimension.
    pub n: usize,
    /// Fast dimension.
    pub m: usize,
    pub f: VectorField,
    pub g: VectorField,
    pub excluded: Option<ExcludedRegion>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("excluded", &self.excluded)
            .finish()
    }
}

impl SystemSpec {
    /// Evaluates `f(x, z, eps)` after the excluded-region check.
    pub fn eval_f(&self, x: &[f64], z: &[f64], eps: f64, out: &mut [f64]) -> Result<(), ModelError> {
        self.check_excluded(z)?;
        (self.f)(x, z, eps, out);
        Ok(())
    }

    /// Evaluates `g(x, z, eps)` after the excluded-region check.
    pub fn eval_g(&self, x: &[f64], z: &[f64], eps: f64, out: &mut [f64]) -> Result<(), ModelError> {
        self.check_excluded(z)?;
        (self.g)(x, z, eps, out);
        Ok(())
    }

    pub fn check_excluded(&self, z: &[f64]) -> Result<(), ModelError> {
        if let Some(ex) = &self.excluded {
            if (ex.contains)(z) {
                return Err(ModelError::ExcludedRegion {
                    point: z.to_vec(),
                    description: ex.description.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Description of the fast-variable set `M`, with a uniform sampler.
#[derive(Clone, Debug)]
pub enum FastSet {
    /// `{z : inner <= ||z - center|| <= outer}`.
    Annulus { center: Vec<f64>, inner: f64, outer: f64 },
    /// Axis-aligned box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl FastSet {
    pub fn dim(&self) -> usize {
        match self {
            FastSet::Annulus { center, .. } => center.len(),
            FastSet::Box { lo, .. } => lo.len(),
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        match self {
            FastSet::Annulus { center, inner, outer } => {
                let r = dist_euclid(z, center);
                *inner <= r && r <= *outer
            }
            FastSet::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(v, (a, b))| *a <= *v && *v <= *b),
        }
    }

    /// Draws a point uniformly from the set.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            FastSet::Annulus { center, inner, outer } => {
                let d = center.len();
                // Radius via inverse CDF of the d-dimensional annulus,
                // direction uniform on the sphere.
                let u: f64 = rng.gen();
                let r = (inner.powi(d as i32) + u * (outer.powi(d as i32) - inner.powi(d as i32)))
                    .powf(1.0 / d as f64);
                let dir = sample_unit_vector(rng, d);
                dir.iter().zip(center.iter()).map(|(v, c)| c + r * v).collect()
            }
            FastSet::Box { lo, hi } => lo
                .iter()
                .zip(hi.iter())
                .map(|(a, b)| rng.gen_range(*a..=*b))
                .collect(),
        }
    }

    /// `max_{z in M} ||z||`, used as the constant `z_bar`.
    pub fn max_norm(&self) -> f64 {
        match self {
            FastSet::Annulus { center, outer, .. } => norm(center) + outer,
            FastSet::Box { lo, hi } => {
                // The norm is maximized at a corner.
                lo.iter()
                    .zip(hi.iter())
                    .map(|(a, b)| a.abs().max(b.abs()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }
}

/// Domain of validity: slow ball `B_R(0)`, fast set `M`, and the upper
/// bound `eps1` on admissible perturbation parameters.
#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub slow_radius: f64,
    pub fast_set: FastSet,
    pub eps1: f64,
}

impl DomainSpec {
    pub fn contains_slow(&self, x: &[f64]) -> bool {
        norm(x) <= self.slow_radius
    }

    pub fn contains_fast(&self, z: &[f64]) -> bool {
        self.fast_set.contains(z)
    }

    /// Uniform sample from `B_R(0)`.
    pub fn sample_slow<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let dir = sample_unit_vector(rng, n);
        let u: f64 = rng.gen();
        let r = self.slow_radius * u.powf(1.0 / n as f64);
        dir.iter().map(|v| r * v).collect()
    }

    pub fn sample_fast<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.fast_set.sample(rng)
    }
}

/// Distance to the attracting set of the boundary layer.
#[derive(Clone)]
pub struct AttractorSpec {
    pub dist: DistanceFn,
    pub description: String,
}

impl AttractorSpec {
    pub fn dist(&self, z: &[f64]) -> f64 {
        (self.dist)(z)
    }
}

impl fmt::Debug for AttractorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttractorSpec")
            .field("description", &self.description)
            .finish()
    }
}

/// Right-hand side of the full system: `dx = f(x,z,eps)`, `dz = g(x,z,eps)/eps`.
pub fn eval_rhs_full(
    sys: &SystemSpec,
    x: &[f64],
    z: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if eps <= 0.0 {
        return Err(ModelError::BadInput(format!("eps must be positive, got {eps}")));
    }
    let mut dx = vec![0.0; sys.n];
    let mut dz = vec![0.0; sys.m];
    sys.eval_f(x, z, eps, &mut dx)?;
    sys.eval_g(x, z, eps, &mut dz)?;
    for v in dz.iter_mut() {
        *v /= eps;
    }
    if dx.iter().chain(dz.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { x: x.to_vec(), z: z.to_vec(), eps });
    }
    Ok((dx, dz))
}

/// A registered system together with its domain, attractor and any
/// closed-form companions it ships with.
#[derive(Clone)]
pub struct SystemBundle {
    pub sys: SystemSpec,
    pub dom: DomainSpec,
    pub att: AttractorSpec,
    /// Analytic average field, when the system has one in closed form.
    pub f_av_analytic: Option<SlowField>,
    /// Analytic averaging envelope `gamma(s)`, when known.
    pub gamma_analytic: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

/// The built-in limit-cycle example: scalar slow state coupled to a
/// planar fast rotation that contracts onto the unit circle.
///
/// ```text
/// x'      = -x + z1 + eps x^2
/// eps z1' = -z1 + z2 + z1/||z||
/// eps z2' = -z1 - z2 + z2/||z|| + eps x
/// ```
///
/// The fast field is undefined at z = 0, so the excluded region is a
/// small disc around the origin.
pub fn builtin_example() -> (SystemSpec, DomainSpec, AttractorSpec) {
    let f: VectorField = Arc::new(|x: &[f64], z: &[f64], eps: f64, out: &mut [f64]| {
        out[0] = -x[0] + z[0] + eps * x[0] * x[0];
    });
    let g: VectorField = Arc::new(|x: &[f64], z: &[f64], eps: f64, out: &mut [f64]| {
        let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
        out[0] = -z[0] + z[1] + z[0] / r;
        out[1] = -z[0] - z[1] + z[1] / r + eps * x[0];
    });
    let clearance = 0.05;
    let excluded = ExcludedRegion {
        contains: Arc::new(move |z: &[f64]| z[0] * z[0] + z[1] * z[1] < clearance * clearance),
        clearance,
        description: "disc around z = 0 where the fast field is singular".to_string(),
    };
    let sys = SystemSpec {
        name: "example".to_string(),
        n: 1,
        m: 2,
        f,
        g,
        excluded: Some(excluded),
    };
    let dom = DomainSpec {
        slow_radius: 2.5,
        fast_set: FastSet::Annulus { center: vec![0.0, 0.0], inner: 0.5, outer: 1.5 },
        eps1: 0.15,
    };
    let att = AttractorSpec {
        dist: Arc::new(|z: &[f64]| ((z[0] * z[0] + z[1] * z[1]).sqrt() - 1.0).abs()),
        description: "unit circle ||z|| = 1".to_string(),
    };
    (sys, dom, att)
}

/// Closed-form boundary-layer solution of the built-in example:
/// radius contracts to 1 exponentially while the angle rotates at unit
/// speed, `z(tau) = ((r0-1)e^{-tau}+1) (cos(theta0-tau), sin(theta0-tau))`.
pub fn example_boundary_closed_form(z0: &[f64], tau: f64) -> Result<Vec<f64>, ModelError> {
    if z0.len() != 2 {
        return Err(ModelError::BadInput(format!("expected 2-d z0, got {}", z0.len())));
    }
    let r0 = (z0[0] * z0[0] + z0[1] * z0[1]).sqrt();
    if r0 == 0.0 {
        return Err(ModelError::BadInput(
            "boundary-layer closed form is undefined at the origin".to_string(),
        ));
    }
    if tau < 0.0 {
        return Err(ModelError::BadInput(format!("tau must be nonnegative, got {tau}")));
    }
    let theta0 = z0[1].atan2(z0[0]);
    let r = (r0 - 1.0) * (-tau).exp() + 1.0;
    let ang = theta0 - tau;
    Ok(vec![r * ang.cos(), r * ang.sin()])
}

/// A linear two-time-scale system with closed-form everything, used for
/// integrator validation and as a second registry entry:
/// `x' = -x + z - 1`, `eps z' = 1 - z`; the fast state settles on z = 1.
pub fn builtin_linear() -> (SystemSpec, DomainSpec, AttractorSpec) {
    let f: VectorField = Arc::new(|x: &[f64], z: &[f64], _eps: f64, out: &mut [f64]| {
        out[0] = -x[0] + z[0] - 1.0;
    });
    let g: VectorField = Arc::new(|_x: &[f64], z: &[f64], _eps: f64, out: &mut [f64]| {
        out[0] = 1.0 - z[0];
    });
    let sys = SystemSpec { name: "linear".to_string(), n: 1, m: 1, f, g, excluded: None };
    let dom = DomainSpec {
        slow_radius: 2.0,
        fast_set: FastSet::Box { lo: vec![0.25], hi: vec![1.75] },
        eps1: 0.5,
    };
    let att = AttractorSpec {
        dist: Arc::new(|z: &[f64]| (z[0] - 1.0).abs()),
        description: "fixed point z = 1".to_string(),
    };
    (sys, dom, att)
}

/// Looks up a registered system by its config-file identifier.
pub fn lookup_system(name: &str) -> Option<SystemBundle> {
    match name {
        "example" => {
            let (sys, dom, att) = builtin_example();
            let z_bar = dom.fast_set.max_norm();
            Some(SystemBundle {
                sys,
                dom,
                att,
                f_av_analytic: Some(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = -x[0])),
                gamma_analytic: Some(Arc::new(move |s: f64| 2.0 * z_bar.max(1.0) / s)),
            })
        }
        "linear" => {
            let (sys, dom, att) = builtin_linear();
            let dev = 0.75; // max |z0 - 1| over the box
            Some(SystemBundle {
                sys,
                dom,
                att,
                f_av_analytic: Some(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = -x[0])),
                gamma_analytic: Some(Arc::new(move |s: f64| dev / s)),
            })
        }
        _ => None,
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist_euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    // Normalized Gaussian; the Box-Muller pair avoids a distr dependency.
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
            })
            .collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rhs_full_example_point() {
        let (sys, _, _) = builtin_example();
        let (dx, dz) = eval_rhs_full(&sys, &[0.0], &[1.0, 0.0], 0.1).unwrap();
        assert!((dx[0] - 1.0).abs() < 1e-15);
        assert!((dz[0] - 0.0).abs() < 1e-15);
        assert!((dz[1] - (-10.0)).abs() < 1e-12);
    }

    #[test]
    fn rhs_full_rejects_excluded_region() {
        let (sys, _, _) = builtin_example();
        let err = eval_rhs_full(&sys, &[0.0], &[0.0, 0.0], 0.1).unwrap_err();
        match err {
            ModelError::ExcludedRegion { point, .. } => assert_eq!(point, vec![0.0, 0.0]),
            other => panic!("expected excluded-region error, got {other:?}"),
        }
    }

    #[test]
    fn rhs_full_zero_field_gives_zero() {
        let f: VectorField = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let g: VectorField = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let sys = SystemSpec { name: "zero".into(), n: 2, m: 3, f, g, excluded: None };
        let (dx, dz) = eval_rhs_full(&sys, &[0.3, -0.4], &[1.0, 2.0, 3.0], 0.05).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(dz.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn example_domain_constants() {
        let (_, dom, att) = builtin_example();
        assert_eq!(dom.slow_radius, 2.5);
        assert_eq!(dom.eps1, 0.15);
        assert!((att.dist(&[0.0, 0.5]) - 0.5).abs() < 1e-15);
        // Points on the unit circle have zero distance.
        for k in 0..50 {
            let th = 2.0 * PI * k as f64 / 50.0;
            assert!(att.dist(&[th.cos(), th.sin()]).abs() < 1e-12);
        }
    }

    #[test]
    fn attractor_distance_nonnegative_and_lipschitz() {
        let (_, dom, att) = builtin_example();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..200 {
            let z = dom.sample_fast(&mut rng);
            let d = att.dist(&z);
            assert!(d >= 0.0);
            if let Some(p) = prev {
                let lhs = (att.dist(&p) - d).abs();
                assert!(lhs <= dist_euclid(&p, &z) * (1.0 + 1e-12));
            }
            prev = Some(z);
        }
    }

    #[test]
    fn closed_form_boundary_matches_radial_decay() {
        // Starting radius 1.5: distance to the circle decays like e^{-tau}.
        let z = example_boundary_closed_form(&[1.5, 0.0], 1.0).unwrap();
        let d = (norm(&z) - 1.0).abs();
        assert!((d - 0.5 * (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn closed_form_boundary_unit_circle_invariant() {
        for tau in [0.0, 0.3, 2.0, 7.5] {
            let z = example_boundary_closed_form(&[(0.7f64).cos(), (0.7f64).sin()], tau).unwrap();
            assert!((norm(&z) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn closed_form_boundary_quarter_turn() {
        // From (1.5, 0) after tau = pi/2: angle -pi/2, radius 1 + 0.5 e^{-pi/2}.
        let tau = PI / 2.0;
        let z = example_boundary_closed_form(&[1.5, 0.0], tau).unwrap();
        let r = 1.0 + 0.5 * (-tau).exp();
        assert!((z[0] - 0.0).abs() < 1e-14);
        assert!((z[1] - (-r)).abs() < 1e-14);
    }

    #[test]
    fn closed_form_boundary_rejects_origin() {
        assert!(example_boundary_closed_form(&[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn polar_and_cartesian_forms_agree() {
        // The example in polar coordinates:
        // x' = -x + r cos th + eps x^2, eps r' = 1 - r + eps x sin th,
        // eps th' = -1 + eps x cos th / r.
        // Transformed back through z = (r cos th, r sin th) it must match
        // the Cartesian right-hand side.
        let (sys, dom, _) = builtin_example();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = dom.sample_slow(&mut rng, 1);
            let z = dom.sample_fast(&mut rng);
            let eps = rng.gen_range(0.01..=0.15);
            let (dx, dz) = eval_rhs_full(&sys, &x, &z, eps).unwrap();

            let r = norm(&z);
            let th = z[1].atan2(z[0]);
            let dx_pol = -x[0] + r * th.cos() + eps * x[0] * x[0];
            let dr = (1.0 - r + eps * x[0] * th.sin()) / eps;
            let dth = (-1.0 + eps * x[0] * th.cos() / r) / eps;
            let dz0 = dr * th.cos() - r * th.sin() * dth;
            let dz1 = dr * th.sin() + r * th.cos() * dth;

            let scale = norm(&dz).max(1.0);
            assert!((dx[0] - dx_pol).abs() <= 1e-12 * dx[0].abs().max(1.0));
            assert!((dz[0] - dz0).abs() <= 1e-12 * scale);
            assert!((dz[1] - dz1).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn fast_set_samplers_respect_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let annulus = FastSet::Annulus { center: vec![0.5, -1.0], inner: 0.3, outer: 2.0 };
        let bx = FastSet::Box { lo: vec![-1.0, 0.0], hi: vec![1.0, 4.0] };
        for _ in 0..500 {
            assert!(annulus.contains(&annulus.sample(&mut rng)));
            assert!(bx.contains(&bx.sample(&mut rng)));
        }
        assert!((annulus.max_norm() - (norm(&[0.5, -1.0]) + 2.0)).abs() < 1e-15);
        assert!((bx.max_norm() - norm(&[1.0, 4.0])).abs() < 1e-15);
    }

    #[test]
    fn registry_knows_builtins() {
        assert!(lookup_system("example").is_some());
        assert!(lookup_system("linear").is_some());
        assert!(lookup_system("nope").is_none());
    }
}
