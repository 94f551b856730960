//! Simulation and error-bound analysis for two-time-scale (singularly
//! perturbed) ODE systems whose fast dynamics settle onto a bounded
//! attractor such as a limit cycle.
//!
//! The library integrates the full system, its boundary-layer system and
//! the reduced average system, constructs the piecewise approximation
//! scheme on the interval grid driven by the implicit map `S_eps`, and
//! evaluates the closed-form deviation bounds in overflow-safe log-domain
//! arithmetic. The `experiments` module runs epsilon sweeps, fits
//! empirical convergence orders and reproduces the demonstration figures.

pub mod averaging;
pub mod bounds;
pub mod config;
pub mod constants;
pub mod experiments;
pub mod integrate;
pub mod model;
pub mod plot;
pub mod scheme;

pub use bounds::{ConstantSet, LogReal};
pub use integrate::{IntegratorConfig, Method, Trajectory};
pub use model::{AttractorSpec, DomainSpec, SystemSpec};
