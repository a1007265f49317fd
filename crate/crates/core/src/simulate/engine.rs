//! Path engine.
//!
//! The Brownian path of each simulation is generated top-down: blocks of
//! `2^TOP_LEVEL` Euler steps receive their total increment first and are split
//! by midpoint (Lévy) refinement only while needed. Inside one piece of the
//! strategy's partition the Euler recursion is linear in the noise, so the
//! state at the end of a block follows from the block increment alone and the
//! discounted dividends are geometric sums. The rate is taken at the left end
//! of each step and the discount factor is integrated exactly over the step.
//! A block is advanced in one go when its endpoints stay in the same piece
//! and the Brownian bridge between them crosses the nearest cut (or zero)
//! with probability below `CROSS_TOL`; otherwise it is split, down to single
//! Euler steps. The result coincides
//! with plain Euler stepping on the same noise except on events of
//! probability below `CROSS_TOL` per accepted block.

use super::noise::{key, Noise, TAG_BRIDGE, TAG_MID, TAG_TOP};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::strategy::Partition;

pub(crate) const TOP_LEVEL: u32 = 12;
pub(crate) const CROSS_TOL: f64 = 1e-10;
/// Bridge exponents above this are treated as zero crossing probability.
const BRIDGE_CUTOFF: f64 = 45.0;

/// Discretisation shared by all paths of a run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Grid<T> {
    pub dt: T,
    pub n_steps: u64,
    pub seed: u64,
    pub bridge: bool,
    pub refine_all: bool,
}

/// Constant-rate window at the start of a path, as in the perturbed strategy.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window<T> {
    pub rate: T,
    pub steps: u64,
    /// Stop early with [`Run::Coalesced`] when the window rate matched the
    /// base strategy at every visited state, i.e. the path equals the base path.
    pub coalesce: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Raw<T> {
    pub y: T,
    /// Σ_k c_k Σ_{j<k} c_j over per-step discounted payments c_k.
    pub cross: T,
    /// Number of steps survived; `None` if alive at the horizon.
    pub ruin_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Run<T> {
    Done(Raw<T>),
    Coalesced,
}

struct Walker<'a, T> {
    a: T,
    b: T,
    rho: T,
    grid: Grid<T>,
    part: &'a Partition<T>,
    window: Option<Window<T>>,
    noise: Noise,
    k_accept: T,
    /// `∫_0^dt e^{−ρs} ds`, the discount mass of one step.
    weight: T,
    geo1: T,
    geo2: T,
    x: T,
    y: T,
    cross: T,
    dead: Option<u64>,
    diverged: bool,
    halt: bool,
}

impl<'a, T: Scalar> Walker<'a, T> {
    /// Lower and upper cut bounding the block with constant rate, or `None`
    /// if a window boundary falls inside the block.
    #[inline]
    fn block_rate(&mut self, k0: u64, m: u64) -> Option<(T, T, Option<T>)> {
        let zero = T::zero();
        if let Some(w) = self.window {
            if k0 < w.steps {
                if k0 + m > w.steps {
                    return None;
                }
                if w.coalesce && !self.diverged {
                    let piece = self.part.piece(self.x);
                    if self.part.rate_of(piece) == w.rate {
                        let (lo, hi) = self.part.bounds(piece);
                        return Some((w.rate, lo.map_or(zero, |l| l.max(zero)), hi));
                    }
                    self.diverged = true;
                }
                return Some((w.rate, zero, None));
            }
        }
        let piece = self.part.piece(self.x);
        let (lo, hi) = self.part.bounds(piece);
        Some((self.part.rate_of(piece), lo.map_or(zero, |l| l.max(zero)), hi))
    }

    #[inline]
    fn rate_at(&mut self, k: u64) -> T {
        match self.window {
            Some(w) if k < w.steps => {
                if w.coalesce && !self.diverged && self.part.rate(self.x) != w.rate {
                    self.diverged = true;
                }
                w.rate
            }
            _ => self.part.rate(self.x),
        }
    }

    #[inline]
    fn pay(&mut self, amount: T) {
        self.cross = self.cross + amount * self.y;
        self.y = self.y + amount;
    }

    fn fine(&mut self, k: u64, dw: T) {
        let c = self.rate_at(k);
        if c > T::zero() {
            let disc = (-self.rho * self.grid.dt * T::from_count(k)).exp();
            self.pay(c * self.weight * disc);
        }
        let x0 = self.x;
        let x1 = x0 + (self.a - c) * self.grid.dt + self.b * dw;
        self.x = x1;
        if x1 <= T::zero() {
            self.dead = Some(k + 1);
            return;
        }
        if self.grid.bridge {
            let e = T::lit(2.0) * x0 * x1 / (self.b * self.b * self.grid.dt);
            if e < T::lit(BRIDGE_CUTOFF) {
                let u: T = self.noise.unit(key(TAG_BRIDGE, 0, k));
                if u < (-e).exp() {
                    self.dead = Some(k + 1);
                }
            }
        }
    }

    /// Tries to advance a whole block at once.
    fn coarse(&mut self, k0: u64, m: u64, dw: T) -> bool {
        if self.grid.refine_all || k0 + m > self.grid.n_steps {
            return false;
        }
        let Some((c, lo, hi)) = self.block_rate(k0, m) else { return false };
        let span = self.grid.dt * T::from_count(m);
        let x0 = self.x;
        let x1 = x0 + (self.a - c) * span + self.b * dw;
        let margin = self.k_accept * span;
        if !(x1 > lo) || (x0 - lo) * (x1 - lo) <= margin {
            return false;
        }
        if let Some(hi) = hi {
            if !(x1 < hi) || (hi - x0) * (hi - x1) <= margin {
                return false;
            }
        }
        if c > T::zero() {
            let base = c * self.weight * (-self.rho * self.grid.dt * T::from_count(k0)).exp();
            let mt = T::from_count(m);
            let s1 = base * (-self.rho * self.grid.dt * mt).exp_m1() / self.geo1;
            let s2 = base * base * (-T::lit(2.0) * self.rho * self.grid.dt * mt).exp_m1() / self.geo2;
            self.cross = self.cross + self.y * s1 + (s1 * s1 - s2) / T::lit(2.0);
            self.y = self.y + s1;
        }
        self.x = x1;
        true
    }

    fn node(&mut self, k0: u64, level: u32, dw: T) {
        if self.dead.is_some() || self.halt || k0 >= self.grid.n_steps {
            return;
        }
        if let Some(w) = self.window {
            if w.coalesce && !self.diverged && k0 >= w.steps {
                self.halt = true;
                return;
            }
        }
        let m = 1u64 << (TOP_LEVEL - level);
        if m == 1 {
            self.fine(k0, dw);
            return;
        }
        if self.coarse(k0, m, dw) {
            return;
        }
        let z: T = self.noise.normal(key(TAG_MID, level, k0 >> (TOP_LEVEL - level)));
        let s = (self.grid.dt * T::from_count(m) / T::lit(4.0)).sqrt() * z;
        let half = dw / T::lit(2.0);
        self.node(k0, level + 1, half + s);
        self.node(k0 + m / 2, level + 1, half - s);
    }
}

/// Simulates one path from `x0`.
pub(crate) fn run_path<T: Scalar>(
    p: &ModelParams<T>,
    part: &Partition<T>,
    window: Option<Window<T>>,
    grid: &Grid<T>,
    x0: T,
    path: u64,
) -> Run<T> {
    let dt = grid.dt;
    let rho = p.rho();
    let mut w = Walker {
        a: p.a(),
        b: p.b(),
        rho,
        grid: *grid,
        part,
        window,
        noise: Noise::new(grid.seed, path),
        k_accept: p.b() * p.b() * T::lit(1.0 / CROSS_TOL).ln() / T::lit(2.0),
        weight: -(-rho * dt).exp_m1() / rho,
        geo1: (-rho * dt).exp_m1(),
        geo2: (-T::lit(2.0) * rho * dt).exp_m1(),
        x: x0,
        y: T::zero(),
        cross: T::zero(),
        dead: None,
        diverged: false,
        halt: false,
    };
    let top = 1u64 << TOP_LEVEL;
    let sqrt_top = (dt * T::from_count(top)).sqrt();
    let blocks = grid.n_steps.div_ceil(top);
    for j in 0..blocks {
        let dw = sqrt_top * w.noise.normal::<T>(key(TAG_TOP, 0, j));
        w.node(j * top, 0, dw);
        if w.dead.is_some() || w.halt {
            break;
        }
    }
    if let Some(win) = window {
        let ended_in_window = w.dead.is_some_and(|k| k <= win.steps);
        if win.coalesce && !w.diverged && (w.halt || ended_in_window || grid.n_steps <= win.steps) {
            return Run::Coalesced;
        }
    }
    Run::Done(Raw { y: w.y, cross: w.cross, ruin_step: w.dead })
}
