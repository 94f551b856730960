//! TOML experiment configuration. Every section has defaults aimed at
//! the built-in example system; CLI flags override file values.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::ConstantSet;
use crate::integrate::{IntegratorConfig, Method};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub system: SystemSection,
    pub integrator: IntegratorSection,
    pub sweep: SweepSection,
    pub constants: ConstantsSection,
    pub estimate: EstimateSection,
    pub average: AverageSection,
    pub bounds: BoundsSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemSection {
    pub name: String,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection { name: "example".to_string() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorSection {
    pub method: String,
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// Zero means no cap.
    pub h_max: f64,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        IntegratorSection {
            method: "rk45-adaptive".to_string(),
            h: 0.0,
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            max_steps: 2_000_000,
            h_max: 0.0,
        }
    }
}

impl IntegratorSection {
    pub fn to_integrator_config(&self) -> Result<IntegratorConfig, String> {
        let method = Method::from_str(&self.method)?;
        Ok(IntegratorConfig {
            method,
            h: self.h,
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_steps: self.max_steps,
            h_max: if self.h_max > 0.0 { Some(self.h_max) } else { None },
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub horizon: f64,
    /// Zero selects the default `horizon / 10`.
    pub t_a: f64,
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub eps_list: Vec<f64>,
    pub grid_points: usize,
    pub t_av: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            horizon: 10.0,
            t_a: 0.0,
            x0: vec![2.0],
            z0: vec![0.0, 1.5],
            eps_list: (0..7).map(|k| 0.15 * 0.5f64.powi(k)).collect(),
            grid_points: 2048,
            t_av: 500.0,
        }
    }
}

/// Analysis constants. When `file` is set the serialized estimate is
/// loaded; otherwise the inline values are used. The inline defaults
/// are the demonstration set for the built-in example: `l` is chosen
/// small enough that the interval grid stays enumerable over horizon 10
/// (the measured Lipschitz constant produces astronomically many
/// intervals), while `p`, `r`, `z_bar` and the decay pair are honest
/// bounds for that system.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstantsSection {
    pub file: Option<String>,
    pub l: f64,
    pub p: f64,
    pub l_av: f64,
    pub r: f64,
    pub z_bar: f64,
    pub horizon: f64,
    pub r_y: f64,
    pub beta_y: f64,
    pub delta_y: Option<f64>,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        ConstantsSection {
            file: None,
            l: 0.5,
            p: 6.0,
            l_av: 1.2,
            r: 2.5,
            z_bar: 1.5,
            horizon: 10.0,
            r_y: 1.0,
            beta_y: 1.0,
            delta_y: None,
        }
    }
}

impl ConstantsSection {
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
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateSection {
    pub n_pairs: usize,
    pub n_samples: usize,
    pub t_av: f64,
    pub decay_tau: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection { n_pairs: 10_000, n_samples: 10_000, t_av: 500.0, decay_tau: 12.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AverageSection {
    pub t_av: f64,
    pub z0: Vec<f64>,
    pub x_points: Vec<f64>,
    pub gamma_x_samples: Vec<f64>,
    pub gamma_z0_samples: Vec<Vec<f64>>,
    pub s_grid: Vec<f64>,
    pub tau_primes: Vec<f64>,
}

impl Default for AverageSection {
    fn default() -> Self {
        AverageSection {
            t_av: 500.0,
            z0: vec![1.2, 0.0],
            x_points: (0..10).map(|k| -2.5 + 5.0 * k as f64 / 9.0).collect(),
            gamma_x_samples: vec![-2.0, 0.7, 2.0],
            gamma_z0_samples: vec![
                vec![1.5, 0.0],
                vec![0.0, 1.2],
                vec![-0.5, 0.0],
                vec![0.0, -0.7],
            ],
            s_grid: vec![5.0, 10.0, 20.0, 50.0, 100.0],
            tau_primes: vec![0.0, 2.5, 7.5, 20.0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsSection {
    pub eps_list: Vec<f64>,
    /// Optional measured-envelope CSV (`s,gamma_hat`) to use instead of
    /// the system's analytic envelope.
    pub envelope_file: Option<String>,
    pub t_a: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            eps_list: (2..=8).map(|k| 10f64.powi(-k)).collect(),
            envelope_file: None,
            t_a: 1.0,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_coherent() {
        let cfg = FileConfig::default();
        assert_eq!(cfg.system.name, "example");
        assert_eq!(cfg.sweep.eps_list.len(), 7);
        assert!((cfg.sweep.eps_list[6] - 0.15 / 64.0).abs() < 1e-15);
        let c = cfg.constants.to_constant_set();
        c.validate().unwrap();
        assert_eq!(c.delta_y, 0.5);
        let integ = cfg.integrator.to_integrator_config().unwrap();
        assert_eq!(integ.method, Method::Rk45Adaptive);
        assert!(integ.h_max.is_none());
    }

    #[test]
    fn partial_toml_overrides_merge_with_defaults() {
        let text = r#"
seed = 7
[sweep]
horizon = 5.0
[integrator]
rel_tol = 1e-7
"#;
        let cfg: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.sweep.horizon, 5.0);
        assert_eq!(cfg.sweep.x0, vec![2.0]);
        assert_eq!(cfg.integrator.rel_tol, 1e-7);
        assert_eq!(cfg.integrator.abs_tol, 1e-11);
    }

    #[test]
    fn bad_method_is_rejected() {
        let sec = IntegratorSection { method: "euler".into(), ..Default::default() };
        assert!(sec.to_integrator_config().is_err());
    }
}
