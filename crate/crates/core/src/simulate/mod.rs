//! Monte Carlo evaluation of a dividend strategy: Euler–Maruyama surplus paths
//! up to ruin or a truncation horizon, discounted dividends accumulated with
//! the left-endpoint rule, and moment estimates of the dividend total `Y`.

mod engine;
mod noise;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::strategy::{Partition, Strategy, StrategyError};

pub(crate) use engine::{run_path, Grid, Raw, Run, Window};

/// Relative size of the dividend tail discarded by the horizon.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-6;

fn default_bridge() -> bool {
    true
}

fn default_batch() -> usize {
    4096
}

/// Simulation settings. `t_max` defaults to the shortest horizon whose
/// discarded dividend tail is at most `1e-6 · d̄/ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: u64,
    pub seed: u64,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "default_bridge")]
    pub bridge_correction: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Disables block stepping so every Euler step is taken explicitly.
    #[serde(default)]
    pub refine_all: bool,
}

impl SimConfig {
    pub fn new(dt: f64, n_paths: u64, seed: u64) -> Self {
        Self {
            dt,
            n_paths,
            seed,
            t_max: None,
            bridge_correction: true,
            batch_size: default_batch(),
            refine_all: false,
        }
    }

    pub fn default_horizon(rho: f64) -> f64 {
        (1.0 / DEFAULT_TRUNCATION_TOL).ln() / rho
    }

    pub fn horizon(&self, rho: f64) -> f64 {
        self.t_max.unwrap_or_else(|| Self::default_horizon(rho))
    }

    /// Number of Euler steps covering the horizon.
    pub fn n_steps(&self, rho: f64) -> u64 {
        (self.horizon(rho) / self.dt - 1e-9).ceil().max(1.0) as u64
    }

    pub fn validate(&self, rho: f64) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config("dt must be > 0".into()));
        }
        if self.n_paths == 0 {
            return Err(SimError::Config("n_paths must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SimError::Config("batch_size must be ≥ 1".into()));
        }
        let t_max = self.horizon(rho);
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(SimError::Config("t_max must be > 0".into()));
        }
        if (-rho * t_max).exp() > DEFAULT_TRUNCATION_TOL * (1.0 + 1e-12) {
            return Err(SimError::Config(format!(
                "t_max = {t_max} leaves a dividend tail above {DEFAULT_TRUNCATION_TOL} of d̄/ρ; need t_max ≥ {}",
                Self::default_horizon(rho)
            )));
        }
        if self.n_steps(rho) >= 1 << 47 {
            return Err(SimError::Config("too many time steps".into()));
        }
        Ok(())
    }

    pub(crate) fn grid<T: Scalar>(&self, rho: f64) -> Grid<T> {
        Grid {
            dt: T::lit(self.dt),
            n_steps: self.n_steps(rho),
            seed: self.seed,
            bridge: self.bridge_correction,
            refine_all: self.refine_all,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("initial surplus must be > 0, got {0}")]
    BadStart(f64),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RuinTime<T> {
    Ruined(T),
    Censored(T),
}

impl<T: Scalar> RuinTime<T> {
    pub fn time(&self) -> T {
        match *self {
            RuinTime::Ruined(t) | RuinTime::Censored(t) => t,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, RuinTime::Censored(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathOutcome<T> {
    pub y: T,
    pub ruin_time: RuinTime<T>,
    /// `2 Σ_k c_k Σ_{j≥k} c_j − Y²` over the discounted per-step payments,
    /// the discrete form of the square identity for `Y`. Equals `Σ c_k²`.
    pub identity_residual: T,
}

impl<T: Scalar> PathOutcome<T> {
    pub(crate) fn from_raw(raw: Raw<T>, grid: &Grid<T>) -> Self {
        let ruin_time = match raw.ruin_step {
            Some(k) => RuinTime::Ruined(grid.dt * T::from_count(k)),
            None => RuinTime::Censored(grid.dt * T::from_count(grid.n_steps)),
        };
        // Σ_k c_k Σ_{j≥k} c_j = Y² − cross.
        let tail_pairs = raw.y * raw.y - raw.cross;
        Self { y: raw.y, ruin_time, identity_residual: T::lit(2.0) * tail_pairs - raw.y * raw.y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MCEstimate<T> {
    pub mean_y: T,
    pub mean_y2: T,
    pub var_y: T,
    pub j: T,
    pub stderr_y: T,
    pub stderr_y2: T,
    pub stderr_j: T,
    pub n_paths: u64,
    pub ruin_fraction: T,
    pub stderr_ruin: T,
    /// Largest per-path `|identity_residual|`.
    pub max_identity_residual: T,
}

/// Raw power sums of `Y`, accumulated per batch and folded in batch order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSums<T> {
    pub n: u64,
    pub ruined: u64,
    pub s1: T,
    pub s2: T,
    pub s3: T,
    pub s4: T,
    pub max_residual: T,
}

impl<T: Scalar> MomentSums<T> {
    pub fn zero() -> Self {
        let z = T::zero();
        Self { n: 0, ruined: 0, s1: z, s2: z, s3: z, s4: z, max_residual: z }
    }

    pub fn push(&mut self, o: &PathOutcome<T>) {
        let y = o.y;
        let y2 = y * y;
        self.n += 1;
        self.ruined += u64::from(!o.ruin_time.is_censored());
        self.s1 = self.s1 + y;
        self.s2 = self.s2 + y2;
        self.s3 = self.s3 + y2 * y;
        self.s4 = self.s4 + y2 * y2;
        self.max_residual = self.max_residual.max(o.identity_residual.abs());
    }

    pub fn merge(&mut self, o: &Self) {
        self.n += o.n;
        self.ruined += o.ruined;
        self.s1 = self.s1 + o.s1;
        self.s2 = self.s2 + o.s2;
        self.s3 = self.s3 + o.s3;
        self.s4 = self.s4 + o.s4;
        self.max_residual = self.max_residual.max(o.max_residual);
    }

    /// Moment estimates for risk aversion `gamma`; `stderr_j` by the delta
    /// method on `(E[Y], E[Y²])`.
    pub fn estimate(&self, gamma: T) -> MCEstimate<T> {
        let n = T::from_count(self.n);
        let m1 = self.s1 / n;
        let m2 = self.s2 / n;
        let m3 = self.s3 / n;
        let m4 = self.s4 / n;
        let bessel = if self.n > 1 { n / (n - T::one()) } else { T::zero() };
        let var_y = m2 - m1 * m1;
        let var_y2 = (m4 - m2 * m2) * bessel;
        let cov = (m3 - m1 * m2) * bessel;
        let half_gamma = gamma / T::lit(2.0);
        let slope = T::one() + gamma * m1;
        let var_psi = slope * slope * var_y * bessel + half_gamma * half_gamma * var_y2
            - T::lit(2.0) * slope * half_gamma * cov;
        let ruin = T::from_count(self.ruined) / n;
        let clamp = |v: T| v.max(T::zero());
        MCEstimate {
            mean_y: m1,
            mean_y2: m2,
            var_y,
            j: m1 - half_gamma * var_y,
            stderr_y: (clamp(var_y * bessel) / n).sqrt(),
            stderr_y2: (clamp(var_y2) / n).sqrt(),
            stderr_j: (clamp(var_psi) / n).sqrt(),
            n_paths: self.n,
            ruin_fraction: ruin,
            stderr_ruin: (clamp(ruin * (T::one() - ruin) * bessel) / n).sqrt(),
            max_identity_residual: self.max_residual,
        }
    }
}

fn checked_start<T: Scalar>(x0: T) -> Result<(), SimError> {
    if x0 > T::zero() && x0.is_finite() {
        Ok(())
    } else {
        Err(SimError::BadStart(x0.as_f64()))
    }
}

fn outcome_of<T: Scalar>(p: &ModelParams<T>, part: &Partition<T>, grid: &Grid<T>, x0: T, path: u64) -> PathOutcome<T> {
    match run_path(p, part, None, grid, x0, path) {
        Run::Done(raw) => PathOutcome::from_raw(raw, grid),
        Run::Coalesced => unreachable!("no window requested"),
    }
}

/// One path; deterministic in `(cfg.seed, path_index)`.
pub fn simulate_path<T: Scalar>(
    p: &ModelParams<T>,
    s: &Strategy<T>,
    x0: T,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<PathOutcome<T>, SimError> {
    cfg.validate(p.rho().as_f64())?;
    checked_start(x0)?;
    let part = s.partition()?;
    Ok(outcome_of(p, &part, &cfg.grid(p.rho().as_f64()), x0, path_index))
}

/// All `cfg.n_paths` paths in index order.
pub fn simulate_paths<T: Scalar>(
    p: &ModelParams<T>,
    s: &Strategy<T>,
    x0: T,
    cfg: &SimConfig,
) -> Result<Vec<PathOutcome<T>>, SimError> {
    cfg.validate(p.rho().as_f64())?;
    checked_start(x0)?;
    let part = s.partition()?;
    let grid = cfg.grid(p.rho().as_f64());
    Ok((0..cfg.n_paths as usize)
        .into_par_iter()
        .with_min_len(cfg.batch_size)
        .map(|i| outcome_of(p, &part, &grid, x0, i as u64))
        .collect())
}

/// Moment estimates over `cfg.n_paths` paths. Bit-identical for a given
/// configuration whatever the thread count.
pub fn estimate<T: Scalar>(
    p: &ModelParams<T>,
    s: &Strategy<T>,
    x0: T,
    cfg: &SimConfig,
) -> Result<MCEstimate<T>, SimError> {
    cfg.validate(p.rho().as_f64())?;
    checked_start(x0)?;
    let part = s.partition()?;
    let grid = cfg.grid(p.rho().as_f64());
    let batch = cfg.batch_size as u64;
    let batches = cfg.n_paths.div_ceil(batch);
    let sums: Vec<MomentSums<T>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut acc = MomentSums::zero();
            for i in b * batch..((b + 1) * batch).min(cfg.n_paths) {
                acc.push(&outcome_of(p, &part, &grid, x0, i));
            }
            acc
        })
        .collect();
    let mut total = MomentSums::zero();
    for s in &sums {
        total.merge(s);
    }
    Ok(total.estimate(p.gamma()))
}

/// Writes `path_index,Y,ruin_time,censored` rows.
pub fn write_paths_csv<T: Scalar, W: Write>(out: W, outcomes: &[PathOutcome<T>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_index", "Y", "ruin_time", "censored"])?;
    for (i, o) in outcomes.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format!("{:e}", o.y),
            format!("{}", o.ruin_time.time()),
            o.ruin_time.is_censored().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
