use std::path::{Path, PathBuf};

use mvdiv::equilibrium::DEFAULT_EPS_LADDER;
use mvdiv::{ModelParams, RawParams, SimConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Either an explicit list or an inclusive `start..=stop` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl Grid {
    pub fn points(&self, name: &str) -> Result<Vec<f64>, Failure> {
        let pts = match *self {
            Grid::List(ref v) => v.clone(),
            Grid::Range { start, stop, step } => {
                if !(step > 0.0 && step.is_finite() && start.is_finite() && stop >= start) {
                    return Err(Failure::Config(format!("{name}: need finite start ≤ stop and step > 0")));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                if n > 1_000_000 {
                    return Err(Failure::Config(format!("{name}: more than 10⁶ points")));
                }
                // Snap to 12 decimals so `0.02 · 3` prints as 0.06.
                (0..=n).map(|i| ((start + step * i as f64) * 1e12).round() / 1e12).collect()
            }
        };
        if pts.is_empty() {
            return Err(Failure::Config(format!("{name} is empty")));
        }
        if pts.iter().any(|x| !x.is_finite()) {
            return Err(Failure::Config(format!("{name} has a non-finite entry")));
        }
        Ok(pts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tabulated {
    /// Two-column `x,rate` file, relative to the config file.
    pub csv: PathBuf,
    #[serde(default)]
    pub tail: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    #[default]
    Equilibrium,
    MaxRate,
    Zero,
    Barrier(f64),
    Constant(f64),
    Tabulated(Tabulated),
}

fn default_mc_paths() -> u64 {
    20_000
}
fn default_mc_dt() -> f64 {
    1e-3
}
fn default_sweep_paths() -> u64 {
    20_000
}
fn default_sweep_dt() -> f64 {
    2.5e-3
}
fn default_nodes() -> usize {
    4000
}
fn default_ladder() -> Vec<f64> {
    DEFAULT_EPS_LADDER.to_vec()
}
fn default_rel() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}
fn yes() -> bool {
    true
}

/// Budgets of the `verify` suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_mc_paths")]
    pub mc_paths: u64,
    #[serde(default = "default_mc_dt")]
    pub mc_dt: f64,
    #[serde(default = "default_nodes")]
    pub oracle_nodes: usize,
    #[serde(default = "yes")]
    pub sweep: bool,
    #[serde(default = "default_sweep_paths")]
    pub sweep_paths: u64,
    #[serde(default = "default_sweep_dt")]
    pub sweep_dt: f64,
    #[serde(default = "default_ladder")]
    pub eps_ladder: Vec<f64>,
    /// Starting surpluses as multiples of `x̃` (or of `1/|r6|` without a barrier).
    #[serde(default = "default_rel")]
    pub x0_relative: Vec<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// Configuration file. The five model parameters sit at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub d_bar: f64,
    pub gamma: f64,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub x_grid: Option<Grid>,
    #[serde(default)]
    pub gamma_grid: Option<Grid>,
    #[serde(default)]
    pub dbar_grid: Option<Grid>,
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default)]
    pub verify: VerifySection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<u64>,
    pub dt: Option<f64>,
}

pub struct Loaded {
    pub config: Config,
    pub bytes: Vec<u8>,
    pub dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let config: Config =
        serde_json::from_slice(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, bytes, dir })
}

impl Config {
    pub fn raw(&self) -> RawParams {
        RawParams { a: self.a, b: self.b, rho: self.rho, d_bar: self.d_bar, gamma: self.gamma }
    }

    pub fn params(&self) -> Result<ModelParams<f64>, Failure> {
        self.raw().validate().map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn seed(&self, o: &Overrides) -> u64 {
        o.seed.or(self.sim.as_ref().map(|s| s.seed)).unwrap_or(0)
    }

    /// Simulation settings for `simulate`, after overrides.
    pub fn sim(&self, o: &Overrides) -> Result<SimConfig, Failure> {
        let mut cfg = self.sim.clone().unwrap_or_else(|| SimConfig::new(1e-3, 20_000, 0));
        cfg.seed = self.seed(o);
        if let Some(n) = o.paths {
            cfg.n_paths = n;
        }
        if let Some(dt) = o.dt {
            cfg.dt = dt;
        }
        cfg.validate(self.rho).map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// A copy of the simulation settings with another step, path count and seed.
    pub fn sim_with(&self, dt: f64, n_paths: u64, seed: u64) -> Result<SimConfig, Failure> {
        let base = self.sim.clone().unwrap_or_else(|| SimConfig::new(dt, n_paths, seed));
        let cfg = SimConfig { dt, n_paths, seed, ..base };
        cfg.validate(self.rho).map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn verify_budgets(&self, o: &Overrides) -> VerifySection {
        let mut v = self.verify.clone();
        if let Some(n) = o.paths {
            v.mc_paths = n;
            v.sweep_paths = n;
        }
        if let Some(dt) = o.dt {
            v.mc_dt = dt;
            v.sweep_dt = dt;
        }
        v
    }
}

impl StrategySpec {
    pub fn label(&self) -> String {
        match self {
            StrategySpec::Equilibrium => "equilibrium".into(),
            StrategySpec::MaxRate => "max_rate".into(),
            StrategySpec::Zero => "zero".into(),
            StrategySpec::Barrier(x) => format!("barrier({x})"),
            StrategySpec::Constant(d) => format!("constant({d})"),
            StrategySpec::Tabulated(t) => format!("tabulated({})", t.csv.display()),
        }
    }

    /// Builds a non-equilibrium strategy; `Equilibrium` is resolved by the caller.
    pub fn build(&self, p: &ModelParams<f64>, dir: &Path) -> Result<Strategy<f64>, Failure> {
        let s = match self {
            StrategySpec::Equilibrium => unreachable!("resolved by the caller"),
            StrategySpec::MaxRate => Ok(Strategy::max_rate(p)),
            StrategySpec::Zero => Ok(Strategy::zero(p)),
            StrategySpec::Barrier(x) => Strategy::barrier(p, *x),
            StrategySpec::Constant(d) => Strategy::constant(p, *d),
            StrategySpec::Tabulated(t) => {
                let path = dir.join(&t.csv);
                let file = std::fs::File::open(&path)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                Strategy::from_csv(p, file, t.tail)
            }
        };
        s.map_err(|e| Failure::Config(e.to_string()))
    }
}
