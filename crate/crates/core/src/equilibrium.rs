//! Monte Carlo check of the equilibrium condition: a candidate strategy is
//! compared with the strategy that pays a constant rate for a short window and
//! then reverts to the candidate. Both are simulated on the same Brownian
//! paths, and the first-order objective loss `(J* − J^ε)/ε` must not be
//! significantly negative as the window shrinks.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::closed_form::ClosedForm;
use crate::model::ModelParams;
use crate::oracle::hjb_expression;
use crate::scalar::Scalar;
use crate::simulate::{run_path, MCEstimate, MomentSums, PathOutcome, Run, SimConfig, SimError, Window};
use crate::strategy::{Partition, Strategy, StrategyError};

/// Windows must span at least this many time steps.
pub const MIN_WINDOW_STEPS: f64 = 20.0;
pub const DEFAULT_EPS_LADDER: [f64; 4] = [0.4, 0.2, 0.1, 0.05];
/// Verdict slack, relative to `d̄/ρ`.
pub const DEFAULT_TOL_REL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquilibriumError {
    #[error("window ε = {eps} needs dt ≤ ε/{MIN_WINDOW_STEPS}, got dt = {dt}")]
    WindowUnresolved { eps: f64, dt: f64 },
    #[error("ε ladder must be nonempty, strictly decreasing and inside (0, 1)")]
    BadLadder,
    #[error("deviation rate {0} is outside [0, d̄]")]
    BadDeviation(f64),
    #[error("empty grid")]
    EmptyGrid,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec<T> {
    pub x0: T,
    pub d_dev: T,
    pub eps_ladder: Vec<T>,
    pub base: Strategy<T>,
}

/// Objective of the candidate and of one perturbation, on common paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedObjective<T> {
    pub eps: T,
    pub j_star: T,
    pub j_eps: T,
    pub slope: T,
    pub stderr_slope: T,
    /// Share of perturbed paths that never left the candidate's own rate.
    pub coalesced_fraction: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeEstimate<T> {
    pub x0: T,
    pub d_dev: T,
    pub per_eps: Vec<PairedObjective<T>>,
    /// Intercept of the least-squares line through `(ε, slope)`.
    pub extrapolated_slope: T,
    pub stderr_extrapolated: T,
    /// Ruin fraction of the candidate's paths.
    pub ruin_fraction: T,
    pub base: MCEstimate<T>,
}

fn window_steps<T: Scalar>(eps: T, cfg: &SimConfig) -> Result<u64, EquilibriumError> {
    let e = eps.as_f64();
    if cfg.dt > e / MIN_WINDOW_STEPS * (1.0 + 1e-9) {
        return Err(EquilibriumError::WindowUnresolved { eps: e, dt: cfg.dt });
    }
    Ok((e / cfg.dt).round() as u64)
}

fn check_ladder<T: Scalar>(ladder: &[T]) -> Result<(), EquilibriumError> {
    let ok = !ladder.is_empty()
        && ladder.iter().all(|e| *e > T::zero() && *e < T::one())
        && ladder.windows(2).all(|w| w[1] < w[0]);
    if ok {
        Ok(())
    } else {
        Err(EquilibriumError::BadLadder)
    }
}

/// Candidate paths, batched exactly like [`crate::simulate::estimate`].
fn base_paths<T: Scalar>(
    p: &ModelParams<T>,
    part: &Partition<T>,
    x0: T,
    cfg: &SimConfig,
) -> (Vec<PathOutcome<T>>, MCEstimate<T>) {
    let grid = cfg.grid::<T>(p.rho().as_f64());
    let outcomes: Vec<PathOutcome<T>> = (0..cfg.n_paths as usize)
        .into_par_iter()
        .with_min_len(cfg.batch_size)
        .map(|i| match run_path(p, part, None, &grid, x0, i as u64) {
            Run::Done(raw) => PathOutcome::from_raw(raw, &grid),
            Run::Coalesced => unreachable!("no window requested"),
        })
        .collect();
    (outcomes.clone(), moments(&outcomes, cfg.batch_size).estimate(p.gamma()))
}

fn moments<T: Scalar>(outcomes: &[PathOutcome<T>], batch: usize) -> MomentSums<T> {
    let mut total = MomentSums::zero();
    for chunk in outcomes.chunks(batch) {
        let mut acc = MomentSums::zero();
        for o in chunk {
            acc.push(o);
        }
        total.merge(&acc);
    }
    total
}

fn perturbed_ys<T: Scalar>(
    p: &ModelParams<T>,
    part: &Partition<T>,
    base: &[PathOutcome<T>],
    x0: T,
    d_dev: T,
    steps: u64,
    cfg: &SimConfig,
) -> (Vec<PathOutcome<T>>, u64) {
    let grid = cfg.grid::<T>(p.rho().as_f64());
    let window = Window { rate: d_dev, steps, coalesce: true };
    let out: Vec<(PathOutcome<T>, bool)> = (0..base.len())
        .into_par_iter()
        .with_min_len(cfg.batch_size)
        .map(|i| match run_path(p, part, Some(window), &grid, x0, i as u64) {
            Run::Done(raw) => (PathOutcome::from_raw(raw, &grid), false),
            Run::Coalesced => (base[i], true),
        })
        .collect();
    let same = out.iter().filter(|o| o.1).count() as u64;
    (out.into_iter().map(|o| o.0).collect(), same)
}

/// Per-path influence of `Y` on `J = E[Y] − (γ/2)Var[Y]`.
fn influence<T: Scalar>(ys: &[PathOutcome<T>], est: &MCEstimate<T>, gamma: T) -> Vec<T> {
    let lin = T::one() + gamma * est.mean_y;
    let half = gamma / T::lit(2.0);
    ys.iter().map(|o| lin * o.y - half * o.y * o.y).collect()
}

fn sample_sd<T: Scalar>(v: &[T]) -> T {
    let n = T::from_count(v.len() as u64);
    let mean = v.iter().copied().sum::<T>() / n;
    let ss = v.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>();
    if v.len() > 1 {
        (ss / (n - T::one())).sqrt()
    } else {
        T::zero()
    }
}

/// Least-squares intercept weights for abscissae `xs`.
pub fn intercept_weights<T: Scalar>(xs: &[T]) -> Vec<T> {
    let n = T::from_count(xs.len() as u64);
    if xs.len() == 1 {
        return vec![T::one()];
    }
    let mean = xs.iter().copied().sum::<T>() / n;
    let sxx = xs.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>();
    xs.iter().map(|x| T::one() / n - mean * (*x - mean) / sxx).collect()
}

/// Candidate and perturbed objective for a single window length.
pub fn perturbed_objective<T: Scalar>(
    p: &ModelParams<T>,
    base: &Strategy<T>,
    x0: T,
    d_dev: T,
    eps: T,
    cfg: &SimConfig,
) -> Result<PairedObjective<T>, EquilibriumError> {
    let spec = PerturbationSpec { x0, d_dev, eps_ladder: vec![eps], base: base.clone() };
    Ok(slope_estimate(p, &spec, cfg)?.per_eps[0])
}

/// Slopes over the whole ladder, reusing the candidate's paths.
pub fn slope_estimate<T: Scalar>(
    p: &ModelParams<T>,
    spec: &PerturbationSpec<T>,
    cfg: &SimConfig,
) -> Result<SlopeEstimate<T>, EquilibriumError> {
    check_ladder(&spec.eps_ladder)?;
    if !(spec.d_dev >= T::zero() && spec.d_dev <= p.d_bar()) {
        return Err(EquilibriumError::BadDeviation(spec.d_dev.as_f64()));
    }
    cfg.validate(p.rho().as_f64())?;
    if !(spec.x0 > T::zero()) {
        return Err(SimError::BadStart(spec.x0.as_f64()).into());
    }
    let steps: Vec<u64> = spec.eps_ladder.iter().map(|e| window_steps(*e, cfg)).collect::<Result<_, _>>()?;
    let part = spec.base.partition()?;
    let gamma = p.gamma();
    let (base_out, base_est) = base_paths(p, &part, spec.x0, cfg);
    let psi_star = influence(&base_out, &base_est, gamma);

    let n = base_out.len();
    let root_n = T::from_count(n as u64).sqrt();
    let weights = intercept_weights(&spec.eps_ladder);
    let mut combined = vec![T::zero(); n];
    let mut per_eps = Vec::with_capacity(steps.len());
    let mut extrapolated = T::zero();
    for ((&eps, &k), &w) in spec.eps_ladder.iter().zip(&steps).zip(&weights) {
        let (pert, same) = perturbed_ys(p, &part, &base_out, spec.x0, spec.d_dev, k, cfg);
        let est = moments(&pert, cfg.batch_size).estimate(gamma);
        let psi = influence(&pert, &est, gamma);
        let diff: Vec<T> = psi_star.iter().zip(&psi).map(|(a, b)| (*a - *b) / eps).collect();
        for (c, d) in combined.iter_mut().zip(&diff) {
            *c = *c + w * *d;
        }
        let slope = (base_est.j - est.j) / eps;
        extrapolated = extrapolated + w * slope;
        per_eps.push(PairedObjective {
            eps,
            j_star: base_est.j,
            j_eps: est.j,
            slope,
            stderr_slope: sample_sd(&diff) / root_n,
            coalesced_fraction: T::from_count(same) / T::from_count(n as u64),
        });
    }
    Ok(SlopeEstimate {
        x0: spec.x0,
        d_dev: spec.d_dev,
        per_eps,
        extrapolated_slope: extrapolated,
        stderr_extrapolated: sample_sd(&combined) / root_n,
        ruin_fraction: base_est.ruin_fraction,
        base: base_est,
    })
}

/// Limit of `(J* − J^ε)/ε` as ε → 0 predicted by closed forms of the candidate.
pub fn first_order_slope<T: Scalar>(form: &ClosedForm<T>, x0: T, d_dev: T) -> T {
    -hjb_expression(form, x0, d_dev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell<T> {
    pub index: usize,
    pub seed: u64,
    pub estimate: SlopeEstimate<T>,
    /// `−(3·stderr + tol)`; the cell fails below it.
    pub threshold: T,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport<T> {
    pub cells: Vec<SweepCell<T>>,
    pub tol: T,
    pub verdict: Verdict,
    /// Cell with the lowest extrapolated slope relative to its threshold.
    pub worst: usize,
}

/// Seed for grid cell `index`.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs every `(x0, d_dev)` cell; fails if any extrapolated slope is below
/// `−(3·stderr + tol)` with `tol = 1e-3·d̄/ρ`.
pub fn equilibrium_sweep<T: Scalar>(
    p: &ModelParams<T>,
    base: &Strategy<T>,
    x0_grid: &[T],
    d_dev_grid: &[T],
    eps_ladder: &[T],
    cfg: &SimConfig,
) -> Result<SweepReport<T>, EquilibriumError> {
    if x0_grid.is_empty() || d_dev_grid.is_empty() {
        return Err(EquilibriumError::EmptyGrid);
    }
    check_ladder(eps_ladder)?;
    for &e in eps_ladder {
        window_steps(e, cfg)?;
    }
    let tol = T::lit(DEFAULT_TOL_REL) * p.perpetuity();
    let three = T::lit(3.0);
    let mut cells = Vec::new();
    for &x0 in x0_grid {
        for &d_dev in d_dev_grid {
            let index = cells.len();
            let seed = cell_seed(cfg.seed, index);
            let cell_cfg = SimConfig { seed, ..cfg.clone() };
            let spec = PerturbationSpec { x0, d_dev, eps_ladder: eps_ladder.to_vec(), base: base.clone() };
            let estimate = slope_estimate(p, &spec, &cell_cfg)?;
            let threshold = -(three * estimate.stderr_extrapolated + tol);
            let verdict = if estimate.extrapolated_slope < threshold { Verdict::Fail } else { Verdict::Pass };
            cells.push(SweepCell { index, seed, estimate, threshold, verdict });
        }
    }
    let worst = cells
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let ka = a.1.estimate.extrapolated_slope - a.1.threshold;
            let kb = b.1.estimate.extrapolated_slope - b.1.threshold;
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|c| c.0)
        .unwrap_or(0);
    let verdict = if cells.iter().any(|c| c.verdict == Verdict::Fail) { Verdict::Fail } else { Verdict::Pass };
    Ok(SweepReport { cells, tol, verdict, worst })
}
