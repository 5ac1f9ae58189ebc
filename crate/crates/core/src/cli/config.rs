//! Scenario files.
//!
//! ```toml
//! n = 10
//! lambda = 0.1          # or: u = ...
//! orders = [2, 3, 4]
//! t_final = 150.0
//! dt = 0.1
//! exact = true
//!
//! [correction]
//! mode = "eom"          # none | purify | eom, applied to the order-2 run
//!
//! [integrator]
//! rtol = 1e-10
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbgky::ModelOperators;
use crate::cluster::{ClosureStrategy, ClusterWeights};
use crate::corrections::{CorrectionConfig, CorrectionMode};
use crate::dimer_exact::{DimerParams, FockState};
use crate::error::{Error, Result};
use crate::integrator::{IntegratorConfig, Method};
use crate::sampling::random_fock_state;

/// Trace distances against the exact run are skipped above this particle
/// number.
pub const TRACE_DISTANCE_MAX_N: usize = 200;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `|N, 0⟩`.
    #[default]
    AllLeft,
    /// `(|N, 0⟩ + |0, N⟩)/√2`.
    Noon,
    /// Gaussian random Fock-space vector drawn from `seed`.
    Random,
}

/// Step control; times come from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSettings {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps_per_dt: usize,
    pub divergence_bound: f64,
    pub method: Method,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        let d = IntegratorConfig::default();
        Self {
            rtol: d.rtol,
            atol: d.atol,
            max_steps_per_dt: 20_000,
            divergence_bound: d.divergence_bound,
            method: d.method,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Particle number.
    pub n: usize,
    /// Tunnelling amplitude; times are in units of `1/J`.
    #[serde(default = "one")]
    pub j: f64,
    /// `U(N−1)/(2J)`.
    pub lambda: Option<f64>,
    pub u: Option<f64>,
    /// Truncation orders, each run separately.
    #[serde(default)]
    pub orders: Vec<usize>,
    pub t_final: f64,
    #[serde(default = "tenth")]
    pub dt: f64,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub closure: ClosureStrategy,
    #[serde(default)]
    pub cluster_weights: ClusterWeights,
    /// Run the exact reference.
    #[serde(default)]
    pub exact: bool,
    /// Highest RDM order written for the exact run; at least the largest
    /// truncation order.
    pub exact_max_order: Option<usize>,
    #[serde(default = "yes")]
    pub cluster_norms: bool,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub correction: CorrectionConfig,
    #[serde(default)]
    pub integrator: IntegratorSettings,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, super::CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| super::CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| super::CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        match (self.lambda, self.u) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("give exactly one of lambda and u".into())
            }
            (Some(x), None) | (None, Some(x)) if !x.is_finite() => {
                return bad("interaction must be finite".into())
            }
            _ => {}
        }
        if !(self.j > 0.0 && self.j.is_finite()) {
            return bad(format!("j must be positive, got {}", self.j));
        }
        if self.orders.is_empty() && !self.exact {
            return bad("nothing to run: no orders and exact = false".into());
        }
        let mut seen = self.orders.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.orders.len() {
            return bad("orders contain duplicates".into());
        }
        if let Some(&o) = self.orders.iter().find(|&&o| o < 2 || o + 1 > self.n) {
            return bad(format!("order {o} outside 2..={}", self.n - 1));
        }
        if let Some(k) = self.exact_max_order {
            if k == 0 || k > self.n {
                return bad(format!("exact_max_order {k} outside 1..={}", self.n));
            }
        }
        if self.correction.mode != CorrectionMode::None && !self.orders.contains(&2) {
            return bad(format!(
                "correction mode {} needs order 2 in orders",
                self.correction.mode
            ));
        }
        self.correction.validate()?;
        self.integrator_config().validate()
    }

    pub fn params(&self) -> Result<DimerParams> {
        match (self.lambda, self.u) {
            (Some(l), _) => DimerParams::from_lambda(self.n, self.j, l),
            (None, Some(u)) => DimerParams::new(self.n, self.j, u),
            (None, None) => Err(Error::Config("no interaction given".into())),
        }
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        IntegratorConfig {
            rtol: self.integrator.rtol,
            atol: self.integrator.atol,
            dt: self.dt,
            t_final: self.t_final,
            max_steps_per_dt: self.integrator.max_steps_per_dt,
            divergence_bound: self.integrator.divergence_bound,
            method: self.integrator.method,
        }
    }

    pub fn initial_state(&self) -> FockState {
        match self.initial {
            InitialState::AllLeft => FockState::all_left(self.n),
            InitialState::Noon => FockState::noon(self.n, 0.0),
            InitialState::Random => {
                random_fock_state(self.n, &mut ChaCha8Rng::seed_from_u64(self.seed))
            }
        }
    }

    pub fn operators(&self, order: usize) -> Result<ModelOperators> {
        ModelOperators::bose_hubbard(&self.params()?, order)
    }

    /// Highest order written for the exact run.
    pub fn exact_order(&self) -> usize {
        let top = self.orders.iter().copied().max().unwrap_or(0);
        self.exact_max_order.unwrap_or(3).max(top).min(self.n)
    }

    pub fn trace_distances(&self) -> bool {
        self.exact && self.n <= TRACE_DISTANCE_MAX_N
    }

    /// Runs in manifest order: exact first, then one uncorrected run per
    /// order, then the corrected order-2 run.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut runs = Vec::new();
        if self.exact {
            runs.push(RunSpec::Exact);
        }
        runs.extend(self.orders.iter().map(|&order| RunSpec::Truncated {
            order,
            mode: CorrectionMode::None,
        }));
        if self.correction.mode != CorrectionMode::None {
            runs.push(RunSpec::Truncated {
                order: 2,
                mode: self.correction.mode,
            });
        }
        runs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunSpec {
    Exact,
    Truncated { order: usize, mode: CorrectionMode },
}

impl RunSpec {
    /// Output subdirectory: `exact`, `o3`, `o2_eom`.
    pub fn name(&self) -> String {
        match self {
            RunSpec::Exact => "exact".into(),
            RunSpec::Truncated {
                order,
                mode: CorrectionMode::None,
            } => format!("o{order}"),
            RunSpec::Truncated { order, mode } => format!("o{order}_{mode}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "n = 10\nlambda = 0.1\norders = [2, 3]\nt_final = 1.0\n";

    #[test]
    fn parses_defaults() {
        let c = ScenarioConfig::from_toml(BASE).unwrap();
        assert_eq!(c.dt, 0.1);
        assert_eq!(c.cluster_weights, ClusterWeights::SetPartition);
        assert_eq!(c.closure, ClosureStrategy::Compatible);
        assert!((c.params().unwrap().lambda() - 0.1).abs() < 1e-15);
        let names: Vec<_> = c.runs().iter().map(RunSpec::name).collect();
        assert_eq!(names, ["o2", "o3"]);
        assert_eq!(c.exact_order(), 3);
    }

    #[test]
    fn corrected_run_is_added() {
        let c = ScenarioConfig::from_toml(&format!(
            "{BASE}exact = true\n[correction]\nmode = \"purify\"\n"
        ))
        .unwrap();
        let names: Vec<_> = c.runs().iter().map(RunSpec::name).collect();
        assert_eq!(names, ["exact", "o2", "o3", "o2_purify"]);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "n = 10\norders = [2]\nt_final = 1.0\n",
            "n = 10\nlambda = 0.1\nu = 0.1\norders = [2]\nt_final = 1.0\n",
            "n = 10\nlambda = 0.1\norders = [10]\nt_final = 1.0\n",
            "n = 10\nlambda = 0.1\norders = [1]\nt_final = 1.0\n",
            "n = 10\nlambda = 0.1\nt_final = 1.0\n",
            "n = 10\nlambda = 0.1\norders = [3]\nt_final = 1.0\n[correction]\nmode = \"eom\"\n",
            "n = 10\nlambda = 0.1\norders = [2]\nt_final = 1.0\ndt = 0.0\n",
            "n = 10\nlambda = 0.1\norders = [2]\nt_final = 1.0\ncolour = 3\n",
            "n = 10\nlambda = 0.1\norders = [2, 2]\nt_final = 1.0\n",
        ];
        for text in cases {
            assert!(ScenarioConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
