//! Experiment configuration, read from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vhempc::{ControllerConfig, FilterKind, FilterSpec, HorizonSchedule, PlantKind, ProblemConfig};

use crate::CliError;

/// A value given either once or as a per-step list (cycled when shorter than the run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStep<T> {
    Constant(T),
    List(Vec<T>),
}

impl<T: Clone> PerStep<T> {
    fn to_vec(&self) -> Vec<T> {
        match self {
            PerStep::Constant(v) => vec![v.clone()],
            PerStep::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterName {
    Pi1,
    Pi2,
    Pi3,
}

impl From<FilterName> for FilterKind {
    fn from(f: FilterName) -> Self {
        match f {
            FilterName::Pi1 => FilterKind::Pi1,
            FilterName::Pi2 => FilterKind::Pi2,
            FilterName::Pi3 => FilterKind::Pi3,
        }
    }
}

fn default_filter() -> FilterName {
    FilterName::Pi3
}
fn default_kappa() -> f64 {
    0.5
}
fn default_upsilon() -> PerStep<f64> {
    PerStep::Constant(1.0)
}
fn default_sigma() -> PerStep<usize> {
    PerStep::Constant(0)
}
fn default_max_steps() -> usize {
    150
}
fn default_terminal_steps() -> usize {
    20
}
fn default_seed() -> u64 {
    0xC0FFEE
}
fn default_repeats() -> usize {
    5
}

/// One `(upsilon, sigma)` pair of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub upsilon: PerStep<f64>,
    pub sigma: PerStep<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub settings: Vec<Setting>,
    /// Edges of the horizon bins for the timing medians; automatic when absent.
    pub horizon_bins: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Section {
    pub b_grid: Vec<f64>,
}

/// Everything needed for `simulate`, `sweep` or `table1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantKind,
    /// Initial state in plant coordinates.
    pub x0: Vec<f64>,
    #[serde(default = "default_filter")]
    pub filter: FilterName,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Plant defaults apply when these are absent.
    pub lambda: Option<f64>,
    pub d: Option<f64>,
    pub b: Option<f64>,
    pub psi_fraction: Option<f64>,
    #[serde(default = "default_upsilon")]
    pub upsilon: PerStep<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: PerStep<usize>,
    pub initial_horizon: Option<usize>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_terminal_steps")]
    pub terminal_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub record_all_filters: bool,
    /// Steps entering the certificate's average; the full run when absent.
    pub average_window: Option<usize>,
    /// Timed repeats per sweep setting, after one discarded warm-up run.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub sweep: Option<SweepSection>,
    pub table1: Option<Table1Section>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and applies the `VHEMPC_SEED` override.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(seed) = std::env::var("VHEMPC_SEED") {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Parse(format!("VHEMPC_SEED is not an unsigned integer: {seed:?}")))?;
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Parse(msg));
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return bad(format!("kappa must lie in (0, 1], got {}", self.kappa));
        }
        if self.upsilon.to_vec().iter().any(|u| !(0.0..=1.0).contains(u)) || self.upsilon.to_vec().is_empty() {
            return bad("upsilon values must lie in [0, 1]".into());
        }
        if self.sigma.to_vec().is_empty() {
            return bad("sigma list is empty".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("x0 must be finite".into());
        }
        if let Some(s) = &self.sweep {
            if s.settings.is_empty() {
                return bad("sweep needs at least one setting".into());
            }
            if let Some(edges) = &s.horizon_bins {
                if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("horizon_bins must be at least two increasing edges".into());
                }
            }
        }
        if let Some(t) = &self.table1 {
            if t.b_grid.is_empty() || t.b_grid.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
                return bad("b_grid needs finite, non-negative values".into());
            }
        }
        Ok(())
    }

    pub fn problem_config(&self) -> ProblemConfig {
        let mut p = ProblemConfig::for_plant(self.plant);
        if let Some(v) = self.lambda {
            p.lambda = v;
        }
        if let Some(v) = self.d {
            p.d = v;
        }
        if let Some(v) = self.b {
            p.b = v;
        }
        if let Some(v) = self.psi_fraction {
            p.psi_fraction = v;
        }
        p
    }

    pub fn controller_config(&self, upsilon: &PerStep<f64>, sigma: &PerStep<usize>) -> Result<ControllerConfig, CliError> {
        let filter = FilterSpec::new(self.filter.into(), self.kappa).map_err(|e| CliError::Parse(e.to_string()))?;
        let schedule =
            HorizonSchedule::new(upsilon.to_vec(), sigma.to_vec()).map_err(|e| CliError::Parse(e.to_string()))?;
        let mut c = ControllerConfig::new(filter, schedule);
        c.initial_horizon = self.initial_horizon;
        c.max_steps = self.max_steps;
        c.terminal_steps = self.terminal_steps;
        c.seed = self.seed;
        c.record_all_filters = self.record_all_filters;
        c.average_window = self.average_window;
        Ok(c)
    }

    pub fn base_controller_config(&self) -> Result<ControllerConfig, CliError> {
        self.controller_config(&self.upsilon, &self.sigma)
    }
}
