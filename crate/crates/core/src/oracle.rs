//! Finite-difference solutions of the linear boundary-value problems for `G`
//! and `H` under an arbitrary piecewise-constant strategy, and the HJB
//! expression evaluated on closed-form solutions.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::closed_form::{ClosedForm, EquilibriumSolution};
use crate::model::{characteristic_pair, ModelParams};
use crate::scalar::Scalar;
use crate::strategy::{Strategy, StrategyError};

pub const MIN_NODES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("tridiagonal system is singular at row {0}")]
    SingularSystem(usize),
    #[error("need at least {MIN_NODES} nodes, got {0}")]
    TooFewNodes(usize),
    #[error("x_max = {x_max} is shorter than the required {required}")]
    DomainTooShort { x_max: f64, required: f64 },
    #[error("strategy needs a constant rate beyond its last knot")]
    NoFarField,
    #[error("G and H grids do not match")]
    GridMismatch,
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Far-field data for a strategy paying a constant `rate` for large surplus.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FarField<T> {
    /// `rate / ρ`.
    level: T,
    /// Decay rate of `G` (negative root with discount ρ).
    g_rate: T,
    /// Decay rate of the second moment's own mode (discount 2ρ).
    h_rate: T,
}

fn far_field<T: Scalar>(p: &ModelParams<T>, s: &Strategy<T>) -> Result<FarField<T>, OracleError> {
    let c = s.far_field_rate().ok_or(OracleError::NoFarField)?;
    let drift = p.a() - c;
    let (_, g_rate) = characteristic_pair(drift, p.b(), p.rho(), T::one());
    let (_, h_rate) = characteristic_pair(drift, p.b(), p.rho(), T::lit(2.0));
    Ok(FarField { level: c / p.rho(), g_rate, h_rate })
}

/// Grid solution of the `G` (and, once completed, `H`) equations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeGrid<T> {
    pub x: Vec<T>,
    pub g: Vec<T>,
    /// Empty until [`solve_h_ode`] has run.
    pub h: Vec<T>,
    /// Cell-averaged dividend rate used at each node.
    pub rate: Vec<T>,
    pub step: T,
    #[serde(skip)]
    strategy: Strategy<T>,
}

impl<T: Scalar> OdeGrid<T> {
    pub fn strategy(&self) -> &Strategy<T> {
        &self.strategy
    }

    /// `V = G − (γ/2)(H − G²)` per node (requires `H`).
    pub fn v(&self, gamma: T) -> Vec<T> {
        self.g
            .iter()
            .zip(&self.h)
            .map(|(&g, &h)| g - gamma / T::lit(2.0) * (h - g * g))
            .collect()
    }
}

/// Nodal rates with the jumps of `s` spread over the adjacent nodes so that
/// the scheme keeps second-order accuracy despite the discontinuity.
fn nodal_rates<T: Scalar>(s: &Strategy<T>, x: &[T], h: T) -> Result<Vec<T>, OracleError> {
    let part = s.partition()?;
    let mut rate: Vec<T> = x.iter().map(|&xi| part.rate(xi)).collect();
    let half = T::lit(0.5);
    let n = x.len();
    for jump in part.jumps() {
        let pos = jump.at / h;
        if !(pos >= T::zero()) || pos > T::from_count((n - 1) as u64) {
            continue;
        }
        let i = pos.floor().to_usize().unwrap_or(0).min(n - 1);
        let theta = pos - T::from_count(i as u64);
        let gap = jump.above - jump.below;
        // Node at or just below the jump.
        rate[i] = rate[i] + gap * (T::one() - theta) * (T::one() - theta) * half;
        // Node just above it.
        if theta > T::zero() && i + 1 < n {
            let theta_up = T::one() - theta;
            rate[i + 1] = rate[i + 1] - gap * (T::one() - theta_up) * (T::one() - theta_up) * half;
        }
    }
    Ok(rate)
}

/// Thomas algorithm; `lower[0]` and `upper[n-1]` are ignored.
fn solve_tridiagonal<T: Scalar>(lower: &[T], diag: &[T], upper: &[T], rhs: &mut [T]) -> Result<(), OracleError> {
    let n = diag.len();
    let mut c = vec![T::zero(); n];
    let tiny = T::min_positive_value().sqrt();
    let mut denom = diag[0];
    if denom.abs() <= tiny || !denom.is_finite() {
        return Err(OracleError::SingularSystem(0));
    }
    c[0] = upper[0] / denom;
    rhs[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom.abs() <= tiny || !denom.is_finite() {
            return Err(OracleError::SingularSystem(i));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { T::zero() };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] = rhs[i] - c[i] * rhs[i + 1];
    }
    Ok(())
}

/// Solves `(b²/2)u″ + (a − d)u′ − kρ u + src = 0` on the nodes, `u(0) = 0`,
/// with `u′(x_max) = robin_slope · u(x_max) + robin_shift` via a ghost node.
fn solve_linear<T: Scalar>(
    p: &ModelParams<T>,
    rate: &[T],
    step: T,
    k: T,
    src: &[T],
    robin_slope: T,
    robin_shift: T,
) -> Result<Vec<T>, OracleError> {
    let n = rate.len() - 1;
    let half_b2 = p.b() * p.b() / T::lit(2.0);
    let h2 = step * step;
    let two = T::lit(2.0);
    let mut lower = vec![T::zero(); n];
    let mut diag = vec![T::zero(); n];
    let mut upper = vec![T::zero(); n];
    let mut rhs = vec![T::zero(); n];
    for i in 1..=n {
        let drift = (p.a() - rate[i]) / (two * step);
        let (mut lo, d, mut up) = (half_b2 / h2 - drift, -two * half_b2 / h2 - k * p.rho(), half_b2 / h2 + drift);
        let mut r = -src[i];
        if i == n {
            // u_{n+1} = u_{n-1} + 2h (robin_slope u_n + robin_shift)
            lo = lo + up;
            r = r - up * two * step * robin_shift;
            let d_extra = up * two * step * robin_slope;
            up = T::zero();
            diag[i - 1] = d + d_extra;
        } else {
            diag[i - 1] = d;
        }
        lower[i - 1] = lo;
        upper[i - 1] = up;
        rhs[i - 1] = r;
    }
    solve_tridiagonal(&lower, &diag, &upper, &mut rhs)?;
    let mut u = Vec::with_capacity(n + 1);
    u.push(T::zero());
    u.extend(rhs);
    Ok(u)
}

/// Minimum domain length for the far-field condition to be accurate.
pub fn min_x_max<T: Scalar>(p: &ModelParams<T>, s: &Strategy<T>) -> Result<T, OracleError> {
    let ff = far_field(p, s)?;
    let (r_pos, _) = characteristic_pair(p.a(), p.b(), p.rho(), T::one());
    let mut reach = (T::one() / r_pos).max(T::one() / ff.g_rate.abs());
    if let Some(last) = s.partition()?.jumps().last() {
        reach = reach + last.at;
    }
    Ok(T::lit(5.0) * reach)
}

/// Expected discounted dividends `G` on `n_nodes` equally spaced nodes of `[0, x_max]`.
pub fn solve_g_ode<T: Scalar>(
    p: &ModelParams<T>,
    s: &Strategy<T>,
    x_max: T,
    n_nodes: usize,
) -> Result<OdeGrid<T>, OracleError> {
    if n_nodes < MIN_NODES {
        return Err(OracleError::TooFewNodes(n_nodes));
    }
    let required = min_x_max(p, s)?;
    if !(x_max >= required) {
        return Err(OracleError::DomainTooShort { x_max: x_max.as_f64(), required: required.as_f64() });
    }
    let ff = far_field(p, s)?;
    let step = x_max / T::from_count((n_nodes - 1) as u64);
    let x: Vec<T> = (0..n_nodes).map(|i| step * T::from_count(i as u64)).collect();
    let rate = nodal_rates(s, &x, step)?;
    let g = solve_linear(p, &rate, step, T::one(), &rate, ff.g_rate, -ff.g_rate * ff.level)?;
    Ok(OdeGrid { x, g, h: Vec::new(), rate, step, strategy: s.clone() })
}

/// Completes `grid` with the second moment `H`.
pub fn solve_h_ode<T: Scalar>(p: &ModelParams<T>, grid: OdeGrid<T>) -> Result<OdeGrid<T>, OracleError> {
    if grid.g.len() != grid.x.len() || grid.rate.len() != grid.x.len() {
        return Err(OracleError::GridMismatch);
    }
    let ff = far_field(p, &grid.strategy)?;
    let two = T::lit(2.0);
    let src: Vec<T> = grid.rate.iter().zip(&grid.g).map(|(&d, &g)| two * d * g).collect();
    // H′ = r_h (H − D²) + 2D (r_g − r_h)(G − D) at the far end.
    let d = ff.level;
    let g_end = grid.g[grid.g.len() - 1];
    let shift = -ff.h_rate * d * d + two * d * (ff.g_rate - ff.h_rate) * (g_end - d);
    let h = solve_linear(p, &grid.rate, grid.step, two, &src, ff.h_rate, shift)?;
    Ok(OdeGrid { h, ..grid })
}

/// Both moments in one call.
pub fn solve_moments<T: Scalar>(
    p: &ModelParams<T>,
    s: &Strategy<T>,
    x_max: T,
    n_nodes: usize,
) -> Result<OdeGrid<T>, OracleError> {
    solve_h_ode(p, solve_g_ode(p, s, x_max, n_nodes)?)
}

/// Largest absolute difference between the grid solution and closed forms.
pub fn max_abs_error<T: Scalar>(grid: &OdeGrid<T>, form: &ClosedForm<T>) -> (T, T) {
    let mut eg = T::zero();
    let mut eh = T::zero();
    for (i, &x) in grid.x.iter().enumerate() {
        eg = eg.max((grid.g[i] - form.g(x)).abs());
        if let Some(&h) = grid.h.get(i) {
            eh = eh.max((h - form.h(x)).abs());
        }
    }
    (eg, eh)
}

/// The HJB bracket at surplus `x` for a constant rate `d`, written out with
/// the generator applied to `V`, `G²` and `G` separately.
pub fn hjb_expression<T: Scalar>(form: &ClosedForm<T>, x: T, d: T) -> T {
    let p = form.params();
    let (g, h, v) = form.jets(x);
    let half_b2 = p.b() * p.b() / T::lit(2.0);
    let two = T::lit(2.0);
    let gamma = p.gamma();
    let gen = |d1: T, d2: T| (p.a() - d) * d1 + half_b2 * d2;
    let gen_v = gen(v.d1, v.d2);
    let gen_g = gen(g.d1, g.d2);
    let gen_g2 = gen(two * g.v * g.d1, two * (g.d1 * g.d1 + g.v * g.d2));
    gen_v - gamma / two * gen_g2 + gamma * g.v * gen_g + d - p.rho() * g.v + gamma * p.rho() * (h.v - g.v * g.v)
}

/// Same bracket after collapsing the `G²` terms: the coefficient of `d` is `1 − V′`.
pub fn hjb_expression_simplified<T: Scalar>(form: &ClosedForm<T>, x: T, d: T) -> T {
    let p = form.params();
    let (g, h, v) = form.jets(x);
    let half_b2 = p.b() * p.b() / T::lit(2.0);
    let gamma = p.gamma();
    p.a() * v.d1 + half_b2 * v.d2 - gamma * half_b2 * g.d1 * g.d1 - p.rho() * g.v
        + gamma * p.rho() * (h.v - g.v * g.v)
        + d * (T::one() - v.d1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HjbNode<T> {
    pub x: T,
    pub at_zero: T,
    pub at_max: T,
    pub sup_residual: T,
    pub argmax_d: T,
    /// Largest gap between the full and simplified forms at the two endpoints.
    pub form_gap: T,
}

/// Supremum over `d ∈ [0, d̄]` of the HJB bracket at each `x`; the bracket is
/// affine in `d`, so the endpoints suffice. Ties go to 0.
pub fn hjb_residual<T: Scalar>(sol: &EquilibriumSolution<T>, xs: &[T]) -> Vec<HjbNode<T>> {
    let form = sol.form();
    let d_bar = sol.params().d_bar();
    xs.iter()
        .map(|&x| {
            let at_zero = hjb_expression(form, x, T::zero());
            let at_max = hjb_expression(form, x, d_bar);
            let gap = (at_zero - hjb_expression_simplified(form, x, T::zero()))
                .abs()
                .max((at_max - hjb_expression_simplified(form, x, d_bar)).abs());
            let (sup, arg) = if at_max > at_zero { (at_max, d_bar) } else { (at_zero, T::zero()) };
            HjbNode { x, at_zero, at_max, sup_residual: sup, argmax_d: arg, form_gap: gap }
        })
        .collect()
}

/// Writes `x,G,H,V,residual,argmax_d`; the last two columns are empty without `hjb`.
pub fn write_grid_csv<T: Scalar, W: Write>(
    out: W,
    grid: &OdeGrid<T>,
    gamma: T,
    hjb: Option<&[HjbNode<T>]>,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "G", "H", "V", "residual", "argmax_d"])?;
    let v = grid.v(gamma);
    for i in 0..grid.x.len() {
        let (res, arg) = match hjb.and_then(|n| n.get(i)) {
            Some(node) => (format!("{:e}", node.sup_residual), format!("{}", node.argmax_d)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            format!("{}", grid.x[i]),
            format!("{:e}", grid.g[i]),
            format!("{:e}", grid.h.get(i).copied().unwrap_or_else(T::nan)),
            format!("{:e}", v.get(i).copied().unwrap_or_else(T::nan)),
            res,
            arg,
        ])?;
    }
    w.flush()?;
    Ok(())
}
