//! Closed-form equilibrium: the barrier equation, smooth-pasting constants,
//! and the expected discounted dividends `G`, their second moment `H` and the
//! mean-variance value `V = G − (γ/2)(H − G²)` in both solved regimes.
//!
//! Exponentials with positive rates are always evaluated relative to the
//! barrier (`e^{r(x − x̃)}`) so that large surplus levels cannot overflow.

use serde::Serialize;
use thiserror::Error;

use crate::model::{compute_roots, CharRoots, ModelParams};
use crate::root::{brent, RootError, Tolerance};
use crate::scalar::Scalar;
use crate::strategy::Strategy;

/// Points used when scanning for a sign change of `f(·, γ) − 1`.
pub const BARRIER_SCAN_POINTS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClosedFormError {
    #[error("f(x, γ) − 1 changes sign {0} times on the scan grid")]
    MultipleRoots(usize),
    #[error("requires d̄/ρ + 1/r6 < 0, got {0}")]
    PreconditionViolated(f64),
    #[error("barrier level must be positive, got {0}")]
    BadBarrier(f64),
    #[error("internal defect: {0}")]
    InternalDefect(&'static str),
    #[error(transparent)]
    Root(#[from] RootError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Barrier,
    MaxRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegimeClass {
    Barrier,
    MaxRate,
    Unresolved,
}

/// Which branch of a piecewise closed form to use at the barrier itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Value with first and second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<T> {
    pub v: T,
    pub d1: T,
    pub d2: T,
}

/// Smooth-pasting constants of the barrier solution, unscaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarrierConstants<T> {
    pub c1: T,
    pub c3: T,
    pub c6: T,
    pub c8: T,
}

/// `(u1 e^{hi·x} − u2 e^{lo·x}) / (v1 e^{hi·x} − v2 e^{lo·x})` with `hi > lo`,
/// factoring out whichever exponential dominates.
fn exp_ratio<T: Scalar>(u1: T, u2: T, v1: T, v2: T, hi: T, lo: T, x: T) -> T {
    if x >= T::zero() {
        let q = ((lo - hi) * x).exp();
        (u1 - u2 * q) / (v1 - v2 * q)
    } else {
        let q = ((hi - lo) * x).exp();
        (u1 * q - u2) / (v1 * q - v2)
    }
}

/// The barrier function `f(x, γ)`; `f(x̃, γ) = 1` characterises the barrier.
///
/// Defined for every real `x` (negative `x` is used when locating the
/// max-rate risk-aversion threshold).
pub fn f_value<T: Scalar>(x: T, gamma: T, roots: &CharRoots<T>, p: &ModelParams<T>) -> T {
    let CharRoots { r1, r2, r3, r4, r6, r8, .. } = *roots;
    let d = p.perpetuity();
    let two = T::lit(2.0);
    let pay = exp_ratio(r1, r2, r1 - r6, r2 - r6, r1, r2, x);
    let level = exp_ratio(T::one(), T::one(), r1 - r6, r2 - r6, r1, r2, x);
    let k1 = r8 * (r1 + r6) - two * r1 * r6;
    let k2 = r8 * (r2 + r6) - two * r2 * r6;
    let second = exp_ratio(k1, k2, r1 - r6, r2 - r6, r1, r2, x);
    let fourth = exp_ratio(r3, r4, r3 - r8, r4 - r8, r3, r4, x);
    -d * r6 * pay + gamma * d * d * r6 * r6 * level * pay - gamma / two * d * d * second * fourth
}

fn scan_max<T: Scalar>(roots: &CharRoots<T>) -> T {
    T::lit(20.0) * (T::one() / roots.r1).max(T::one() / roots.r2.abs())
}

/// Positive root of `f(·, γ) − 1`.
///
/// `Ok(None)` when there is no sign change on `(0, x_scan_max]`.
pub fn solve_barrier<T: Scalar>(p: &ModelParams<T>) -> Result<Option<T>, ClosedFormError> {
    let roots = compute_roots(p);
    let g = |x: T| f_value(x, p.gamma(), &roots, p) - T::one();
    let hi = scan_max(&roots);
    let step = hi / T::from_count(BARRIER_SCAN_POINTS as u64);
    let mut brackets = Vec::new();
    let mut prev_x = T::zero();
    let mut prev = g(prev_x);
    for i in 1..=BARRIER_SCAN_POINTS {
        let x = step * T::from_count(i as u64);
        let cur = g(x);
        if cur == T::zero() || (prev != T::zero() && (prev > T::zero()) != (cur > T::zero())) {
            brackets.push((prev_x, x));
        }
        prev_x = x;
        prev = cur;
    }
    match brackets.len() {
        0 => Ok(None),
        1 => {
            let (lo, hi) = brackets[0];
            let r = brent(g, lo, hi, Tolerance::default())?;
            Ok(Some(r.root))
        }
        n => Err(ClosedFormError::MultipleRoots(n)),
    }
}

/// Scaled constants, `c_k = C_k · e^{r_k x̃}`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scaled<T> {
    c1: T,
    c3: T,
    c6: T,
    c8: T,
}

fn scaled_constants<T: Scalar>(
    level: T,
    roots: &CharRoots<T>,
    p: &ModelParams<T>,
) -> Result<Scaled<T>, ClosedFormError> {
    let CharRoots { r1, r2, r3, r4, r6, r8, .. } = *roots;
    let d = p.perpetuity();
    let two = T::lit(2.0);
    let q = ((r2 - r1) * level).exp();
    let s = ((r4 - r3) * level).exp();
    let den1 = (r1 - r6) - (r2 - r6) * q;
    let den2 = (r3 - r8) - (r4 - r8) * s;
    if !(den1 > T::zero()) || !(den2 > T::zero()) {
        return Err(ClosedFormError::InternalDefect("pasting denominator not positive"));
    }
    let k1 = r8 * (r1 + r6) - two * r6 * r1;
    let k2 = r8 * (r2 + r6) - two * r6 * r2;
    let mixed = (k1 - k2 * q) / den1;
    Ok(Scaled {
        c1: -d * r6 / den1,
        c6: -d * (r1 - r2 * q) / den1,
        c3: d * d * mixed / den2,
        c8: d * d * (T::one() - s) / den2 * mixed + d * d * ((r1 + r6) - (r2 + r6) * q) / den1,
    })
}

/// Smooth-pasting constants `C1, C3, C6, C8` for a barrier at `x_tilde > 0`.
pub fn compute_constants<T: Scalar>(
    x_tilde: T,
    roots: &CharRoots<T>,
    p: &ModelParams<T>,
) -> Result<BarrierConstants<T>, ClosedFormError> {
    if !(x_tilde > T::zero()) || !x_tilde.is_finite() {
        return Err(ClosedFormError::BadBarrier(x_tilde.as_f64()));
    }
    let s = scaled_constants(x_tilde, roots, p)?;
    let c = BarrierConstants {
        c1: s.c1 * (-roots.r1 * x_tilde).exp(),
        c3: s.c3 * (-roots.r3 * x_tilde).exp(),
        c6: s.c6 * (-roots.r6 * x_tilde).exp(),
        c8: s.c8 * (-roots.r8 * x_tilde).exp(),
    };
    if !(c.c1 > T::zero()) || !(c.c6 < T::zero()) {
        return Err(ClosedFormError::InternalDefect("expected C1 > 0 and C6 < 0"));
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape<T> {
    Barrier { level: T, k: Scaled<T> },
    MaxRate,
}

/// Closed-form `G`, `H` and `V` of a barrier strategy (at any level) or of
/// paying `d̄` everywhere. No equilibrium claim is attached; see
/// [`EquilibriumSolution`] for that.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm<T> {
    params: ModelParams<T>,
    roots: CharRoots<T>,
    shape: Shape<T>,
}

impl<T: Scalar> ClosedForm<T> {
    pub fn barrier(p: &ModelParams<T>, level: T) -> Result<Self, ClosedFormError> {
        if !(level >= T::zero()) || !level.is_finite() {
            return Err(ClosedFormError::BadBarrier(level.as_f64()));
        }
        let roots = compute_roots(p);
        let k = scaled_constants(level, &roots, p)?;
        Ok(Self { params: *p, roots, shape: Shape::Barrier { level, k } })
    }

    pub fn max_rate(p: &ModelParams<T>) -> Self {
        Self { params: *p, roots: compute_roots(p), shape: Shape::MaxRate }
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn roots(&self) -> &CharRoots<T> {
        &self.roots
    }

    pub fn barrier_level(&self) -> Option<T> {
        match self.shape {
            Shape::Barrier { level, .. } => Some(level),
            Shape::MaxRate => None,
        }
    }

    pub fn constants(&self) -> Option<BarrierConstants<T>> {
        match self.shape {
            Shape::Barrier { level, k } => Some(BarrierConstants {
                c1: k.c1 * (-self.roots.r1 * level).exp(),
                c3: k.c3 * (-self.roots.r3 * level).exp(),
                c6: k.c6 * (-self.roots.r6 * level).exp(),
                c8: k.c8 * (-self.roots.r8 * level).exp(),
            }),
            Shape::MaxRate => None,
        }
    }

    /// The strategy these closed forms describe.
    pub fn strategy(&self) -> Strategy<T> {
        match self.shape {
            Shape::Barrier { level, .. } => {
                Strategy::barrier(&self.params, level).expect("level validated at construction")
            }
            Shape::MaxRate => Strategy::max_rate(&self.params),
        }
    }

    /// Dividend rate of the described strategy.
    pub fn rate(&self, x: T) -> T {
        match self.shape {
            Shape::Barrier { level, .. } if x <= level => T::zero(),
            _ => self.params.d_bar(),
        }
    }

    fn side(&self, x: T) -> Side {
        match self.shape {
            Shape::Barrier { level, .. } if x <= level => Side::Left,
            _ => Side::Right,
        }
    }

    pub fn g_jet(&self, x: T, side: Side) -> Jet<T> {
        let r = &self.roots;
        let d = self.params.perpetuity();
        match (self.shape, side) {
            (Shape::Barrier { level, k }, Side::Left) => {
                let e1 = (r.r1 * (x - level)).exp();
                let e2 = (r.r2 * x - r.r1 * level).exp();
                Jet {
                    v: k.c1 * (e1 - e2),
                    d1: k.c1 * (r.r1 * e1 - r.r2 * e2),
                    d2: k.c1 * (r.r1 * r.r1 * e1 - r.r2 * r.r2 * e2),
                }
            }
            (Shape::Barrier { level, k }, Side::Right) => {
                let e6 = k.c6 * (r.r6 * (x - level)).exp();
                Jet { v: e6 + d, d1: r.r6 * e6, d2: r.r6 * r.r6 * e6 }
            }
            (Shape::MaxRate, _) => {
                let e6 = (r.r6 * x).exp();
                Jet { v: d * (T::one() - e6), d1: -d * r.r6 * e6, d2: -d * r.r6 * r.r6 * e6 }
            }
        }
    }

    pub fn h_jet(&self, x: T, side: Side) -> Jet<T> {
        let r = &self.roots;
        let d = self.params.perpetuity();
        let two = T::lit(2.0);
        match (self.shape, side) {
            (Shape::Barrier { level, k }, Side::Left) => {
                let e3 = (r.r3 * (x - level)).exp();
                let e4 = (r.r4 * x - r.r3 * level).exp();
                Jet {
                    v: k.c3 * (e3 - e4),
                    d1: k.c3 * (r.r3 * e3 - r.r4 * e4),
                    d2: k.c3 * (r.r3 * r.r3 * e3 - r.r4 * r.r4 * e4),
                }
            }
            (Shape::Barrier { level, k }, Side::Right) => {
                let e8 = k.c8 * (r.r8 * (x - level)).exp();
                let e6 = two * d * k.c6 * (r.r6 * (x - level)).exp();
                Jet {
                    v: e8 + e6 + d * d,
                    d1: r.r8 * e8 + r.r6 * e6,
                    d2: r.r8 * r.r8 * e8 + r.r6 * r.r6 * e6,
                }
            }
            (Shape::MaxRate, _) => {
                let e6 = (r.r6 * x).exp();
                let e8 = (r.r8 * x).exp();
                let d2 = d * d;
                Jet {
                    v: d2 * (T::one() - two * e6 + e8),
                    d1: d2 * (r.r8 * e8 - two * r.r6 * e6),
                    d2: d2 * (r.r8 * r.r8 * e8 - two * r.r6 * r.r6 * e6),
                }
            }
        }
    }

    /// `V = G − (γ/2)(H − G²)` and its derivatives.
    pub fn v_jet(&self, x: T, side: Side) -> Jet<T> {
        let g = self.g_jet(x, side);
        let h = self.h_jet(x, side);
        let half_gamma = self.params.gamma() / T::lit(2.0);
        let two = T::lit(2.0);
        Jet {
            v: g.v - half_gamma * (h.v - g.v * g.v),
            d1: g.d1 - half_gamma * (h.d1 - two * g.v * g.d1),
            d2: g.d2 - half_gamma * (h.d2 - two * g.d1 * g.d1 - two * g.v * g.d2),
        }
    }

    pub fn g(&self, x: T) -> T {
        self.g_jet(x, self.side(x)).v
    }

    pub fn h(&self, x: T) -> T {
        self.h_jet(x, self.side(x)).v
    }

    pub fn v(&self, x: T) -> T {
        self.v_jet(x, self.side(x)).v
    }

    /// `V'` on the branch that owns `x`.
    pub fn v_prime(&self, x: T) -> T {
        self.v_jet(x, self.side(x)).d1
    }

    pub fn variance(&self, x: T) -> T {
        let g = self.g(x);
        self.h(x) - g * g
    }

    pub fn jets(&self, x: T) -> (Jet<T>, Jet<T>, Jet<T>) {
        let side = self.side(x);
        (self.g_jet(x, side), self.h_jet(x, side), self.v_jet(x, side))
    }
}

/// A solved equilibrium in one of the two regimes with a closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumSolution<T> {
    regime: Regime,
    form: ClosedForm<T>,
}

impl<T: Scalar> EquilibriumSolution<T> {
    /// Barrier equilibrium at a root of `f(·, γ) = 1`.
    pub fn barrier(p: &ModelParams<T>, x_tilde: T) -> Result<Self, ClosedFormError> {
        let roots = compute_roots(p);
        compute_constants(x_tilde, &roots, p)?;
        Ok(Self { regime: Regime::Barrier, form: ClosedForm::barrier(p, x_tilde)? })
    }

    /// Paying `d̄` everywhere; requires `d̄/ρ + 1/r6 < 0`.
    pub fn max_rate(p: &ModelParams<T>) -> Result<Self, ClosedFormError> {
        let cond = payout_condition(p);
        if !(cond < T::zero()) {
            return Err(ClosedFormError::PreconditionViolated(cond.as_f64()));
        }
        Ok(Self { regime: Regime::MaxRate, form: ClosedForm::max_rate(p) })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn x_tilde(&self) -> Option<T> {
        self.form.barrier_level()
    }

    pub fn constants(&self) -> Option<BarrierConstants<T>> {
        self.form.constants()
    }

    pub fn form(&self) -> &ClosedForm<T> {
        &self.form
    }

    pub fn params(&self) -> &ModelParams<T> {
        self.form.params()
    }

    pub fn roots(&self) -> &CharRoots<T> {
        self.form.roots()
    }

    pub fn eval_g(&self, x: T) -> T {
        self.form.g(x)
    }

    pub fn eval_h(&self, x: T) -> T {
        self.form.h(x)
    }

    pub fn eval_v(&self, x: T) -> T {
        self.form.v(x)
    }

    /// `f(x̃, γ) − 1`; zero up to solver tolerance for a barrier solution.
    pub fn f_residual(&self) -> Option<T> {
        self.x_tilde().map(|x| f_value(x, self.params().gamma(), self.roots(), self.params()) - T::one())
    }

    pub fn strategy(&self) -> Strategy<T> {
        self.form.strategy()
    }

    /// Returns a copy whose `C1` (and with it `G` below the barrier) is scaled
    /// by `1 + rel`. Only meant for exercising the verification checks.
    pub fn with_perturbed_c1(&self, rel: T) -> Self {
        let mut out = *self;
        if let Shape::Barrier { ref mut k, .. } = out.form.shape {
            k.c1 = k.c1 * (T::one() + rel);
        }
        out
    }
}

/// `d̄/ρ + 1/r6`: negative in the max-rate regime, positive when the barrier is positive.
pub fn payout_condition<T: Scalar>(p: &ModelParams<T>) -> T {
    p.perpetuity() + T::one() / compute_roots(p).r6
}

/// The `d̄` at which `d̄/ρ + 1/r6(d̄)` changes sign, holding `a, b, ρ` fixed.
/// `None` when it stays negative for every cap (non-positive drift).
pub fn payout_threshold<T: Scalar>(p: &ModelParams<T>) -> Result<Option<T>, ClosedFormError> {
    let cond = |d: T| match p.with_d_bar(d) {
        Ok(q) => payout_condition(&q),
        Err(_) => T::nan(),
    };
    let scale = p.a().abs() + p.b() * p.b() + p.rho();
    let mut lo = scale * T::lit(1e-9);
    if cond(lo) >= T::zero() {
        return Ok(Some(lo));
    }
    let mut hi = lo;
    for _ in 0..80 {
        hi = hi * T::lit(2.0);
        if cond(hi) > T::zero() {
            let tol = Tolerance { x: T::epsilon() * hi * T::lit(16.0), f: T::lit(1e-12), max_iter: 500 };
            return Ok(Some(brent(cond, lo, hi, tol)?.root));
        }
        lo = hi;
    }
    Ok(None)
}

/// Max-rate risk-aversion threshold and the two bounds it is the minimum of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsTilde<T> {
    pub value: T,
    /// Largest γ with `V'(x) ≤ 1` on `(0, 2 x_m]`.
    pub marginal_bound: T,
    /// Largest γ up to which the non-positive root of `f(·, γ) = 1` persists.
    pub root_branch_bound: Option<T>,
    pub x_m: T,
}

const EPS_TILDE_TOL: f64 = 1e-4;
const SUP_GRID: usize = 2000;

/// Maximum of `f` on `[lo, hi]`: grid search then golden-section refinement.
fn sup_on<T: Scalar, F: Fn(T) -> T>(f: F, lo: T, hi: T, n: usize) -> (T, T) {
    let step = (hi - lo) / T::from_count(n as u64);
    let mut best = (lo, f(lo));
    for i in 1..=n {
        let x = lo + step * T::from_count(i as u64);
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    let mut a = (best.0 - step).max(lo);
    let mut b = (best.0 + step).min(hi);
    let phi = T::lit(0.618_033_988_749_894_8);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

/// `V'` of the max-rate solution.
pub fn max_rate_v_prime<T: Scalar>(x: T, gamma: T, roots: &CharRoots<T>, p: &ModelParams<T>) -> T {
    let d = p.perpetuity();
    let two = T::lit(2.0);
    let (r6, r8) = (roots.r6, roots.r8);
    -d * r6 * (r6 * x).exp()
        - gamma / two * d * d * (r8 * (r8 * x).exp() - two * r6 * (two * r6 * x).exp())
}

/// Argmax of the max-rate variance `(d̄/ρ)²(e^{r8 x} − e^{2 r6 x})`.
pub fn variance_peak<T: Scalar>(roots: &CharRoots<T>) -> T {
    let two = T::lit(2.0);
    (two * roots.r6 / roots.r8).ln() / (roots.r8 - two * roots.r6)
}

/// Risk-aversion threshold below which paying `d̄` everywhere is an equilibrium.
pub fn find_eps_tilde<T: Scalar>(p: &ModelParams<T>) -> Result<EpsTilde<T>, ClosedFormError> {
    let cond = payout_condition(p);
    if !(cond < T::zero()) {
        return Err(ClosedFormError::PreconditionViolated(cond.as_f64()));
    }
    let roots = compute_roots(p);
    let x_m = variance_peak(&roots);
    let tol = T::lit(EPS_TILDE_TOL);
    let one = T::one();

    // V' is affine in γ, so the grid suprema are cheap to recompute.
    let sup_vp = |gamma: T| {
        let tiny = x_m * T::lit(1e-9);
        sup_on(|x| max_rate_v_prime(x, gamma, &roots, p), tiny, T::lit(2.0) * x_m, SUP_GRID).1
    };
    let mut lo = T::zero();
    let mut hi = one;
    let mut grown = 0;
    while sup_vp(hi) <= one {
        lo = hi;
        hi = hi * T::lit(2.0);
        grown += 1;
        if grown > 60 {
            return Err(ClosedFormError::InternalDefect("V' bound on (0, 2x_m] never binds"));
        }
    }
    while hi - lo > tol * T::lit(1e-2) {
        let mid = (lo + hi) / T::lit(2.0);
        if sup_vp(mid) <= one {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let marginal_bound = lo;

    let root_branch_bound = root_branch_limit(p, &roots, marginal_bound)?;
    let value = root_branch_bound.map_or(marginal_bound, |r| r.min(marginal_bound));
    Ok(EpsTilde { value, marginal_bound, root_branch_bound, x_m })
}

/// First γ at which `sup_{x ≤ 0} f(x, γ) − 1` turns negative, i.e. where the
/// non-positive barrier root of the γ = 0 problem folds away. Searched on
/// `[0, cap]`; `None` if it never happens there.
fn root_branch_limit<T: Scalar>(
    p: &ModelParams<T>,
    roots: &CharRoots<T>,
    cap: T,
) -> Result<Option<T>, ClosedFormError> {
    let span = scan_max(roots);
    let phi = |gamma: T| sup_on(|x| f_value(x, gamma, roots, p), -span, T::zero(), BARRIER_SCAN_POINTS).1 - T::one();
    if phi(T::zero()) < T::zero() {
        return Ok(None);
    }
    // sup of functions affine in γ is convex in γ: ternary search for its minimum.
    let (mut a, mut b) = (T::zero(), cap);
    let third = T::one() / T::lit(3.0);
    while b - a > T::lit(EPS_TILDE_TOL * 1e-2) {
        let m1 = a + (b - a) * third;
        let m2 = b - (b - a) * third;
        if phi(m1) < phi(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let g_min = (a + b) / T::lit(2.0);
    if phi(g_min) >= T::zero() {
        return Ok(None);
    }
    let tol = Tolerance { x: T::lit(EPS_TILDE_TOL * 1e-2), f: T::lit(1e-10), max_iter: 200 };
    let r = brent(phi, T::zero(), g_min, tol)?;
    Ok(Some(r.root))
}

/// Regime verdict plus whatever was computed on the way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification<T> {
    pub class: RegimeClass,
    pub payout_condition: T,
    pub x_tilde: Option<T>,
    pub eps_tilde: Option<EpsTilde<T>>,
    /// Set when the barrier scan found several sign changes.
    pub sign_changes: Option<usize>,
}

pub fn classify_regime<T: Scalar>(p: &ModelParams<T>) -> Classification<T> {
    let cond = payout_condition(p);
    let mut out =
        Classification { class: RegimeClass::Unresolved, payout_condition: cond, x_tilde: None, eps_tilde: None, sign_changes: None };
    if cond < T::zero() {
        if let Ok(eps) = find_eps_tilde(p) {
            out.eps_tilde = Some(eps);
            if p.gamma() < eps.value {
                out.class = RegimeClass::MaxRate;
            }
        }
    } else if cond > T::zero() {
        match solve_barrier(p) {
            Ok(Some(x)) => {
                out.x_tilde = Some(x);
                out.class = RegimeClass::Barrier;
            }
            Ok(None) => {}
            Err(ClosedFormError::MultipleRoots(n)) => out.sign_changes = Some(n),
            Err(_) => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("no closed-form equilibrium for these parameters (d̄/ρ + 1/r6 = {payout_condition}, γ = {gamma})")]
    Unresolved { payout_condition: f64, gamma: f64 },
    #[error(transparent)]
    ClosedForm(#[from] ClosedFormError),
}

/// Classifies and builds the equilibrium, refusing the unresolved regime.
pub fn solve<T: Scalar>(p: &ModelParams<T>) -> Result<(EquilibriumSolution<T>, Classification<T>), SolveError> {
    let class = classify_regime(p);
    let sol = match (class.class, class.x_tilde) {
        (RegimeClass::Barrier, Some(x)) => EquilibriumSolution::barrier(p, x)?,
        (RegimeClass::MaxRate, _) => EquilibriumSolution::max_rate(p)?,
        _ => {
            return Err(SolveError::Unresolved {
                payout_condition: class.payout_condition.as_f64(),
                gamma: p.gamma().as_f64(),
            })
        }
    };
    Ok((sol, class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1(d_bar: f64, gamma: f64) -> ModelParams<f64> {
        ModelParams::new(0.1, 0.35, 0.05, d_bar, gamma).unwrap()
    }

    /// f(x, 0) written out with raw exponentials.
    fn f_gamma0_naive(x: f64, p: &ModelParams<f64>) -> f64 {
        let r = compute_roots(p);
        let (e1, e2) = ((r.r1 * x).exp(), (r.r2 * x).exp());
        -p.perpetuity() * r.r6 * (r.r1 * e1 - r.r2 * e2) / ((r.r1 - r.r6) * e1 - (r.r2 - r.r6) * e2)
    }

    fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn f_at_zero() {
        for (d_bar, gamma) in [(0.05, 0.2), (0.03, 0.3), (0.1, 0.0), (0.02, 1.5)] {
            let p = fig1(d_bar, gamma);
            let r = compute_roots(&p);
            let d = p.perpetuity();
            let expect = -d * r.r6 - gamma / 2.0 * d * d * (r.r8 - 2.0 * r.r6);
            assert!((f_value(0.0, gamma, &r, &p) - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn f_at_zero_exceeds_one_iff_positive_barrier() {
        for i in 1..200 {
            let p = fig1(0.0005 * i as f64, 0.0);
            let r = compute_roots(&p);
            let above = f_value(0.0, 0.0, &r, &p) > 1.0;
            assert_eq!(above, payout_condition(&p) > 0.0, "d̄ = {}", p.d_bar());
        }
    }

    #[test]
    fn f_stable_for_large_surplus() {
        let p = fig1(0.05, 0.2);
        let r = compute_roots(&p);
        for x in [100.0, 1e3, 1e4, 1e6] {
            let v = f_value(x, 0.2, &r, &p);
            assert!(v.is_finite(), "x = {x}");
        }
        assert!((f_value(60.0, 0.0, &r, &p) - f_gamma0_naive(60.0, &p)).abs() < 1e-12);
    }

    #[test]
    fn barrier_exists_at_reference_params() {
        let p = fig1(0.05, 0.2);
        let x = solve_barrier(&p).unwrap().unwrap();
        assert!(x > 0.0);
        let r = compute_roots(&p);
        assert!((f_value(x, 0.2, &r, &p) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn no_positive_barrier_below_threshold() {
        assert_eq!(solve_barrier(&fig1(0.03, 0.2)).unwrap(), None);
    }

    #[test]
    fn gamma_zero_barrier_matches_bisection() {
        let p = fig1(0.05, 0.0);
        let x = solve_barrier(&p).unwrap().unwrap();
        let oracle = bisect(|x| f_gamma0_naive(x, &p) - 1.0, 1e-9, 20.0);
        assert!((x - oracle).abs() < 1e-8, "{x} vs {oracle}");
    }

    #[test]
    fn constants_match_linear_pasting_system() {
        use nalgebra::{Matrix4, Vector4};
        for (d_bar, gamma) in [(0.05, 0.2), (0.1, 0.4), (0.05, 0.0)] {
            let p = fig1(d_bar, gamma);
            let r = compute_roots(&p);
            let x = solve_barrier(&p).unwrap().unwrap();
            let c = compute_constants(x, &r, &p).unwrap();
            let d = p.perpetuity();
            let (e1, e2, e3, e4, e6, e8) = (
                (r.r1 * x).exp(),
                (r.r2 * x).exp(),
                (r.r3 * x).exp(),
                (r.r4 * x).exp(),
                (r.r6 * x).exp(),
                (r.r8 * x).exp(),
            );
            // Unknowns (C1, C6, C3, C8): continuity of G, G', H, H' at x̃.
            #[rustfmt::skip]
            let m = Matrix4::new(
                e1 - e2, -e6, 0.0, 0.0,
                r.r1 * e1 - r.r2 * e2, -r.r6 * e6, 0.0, 0.0,
                0.0, -2.0 * d * e6, e3 - e4, -e8,
                0.0, -2.0 * d * r.r6 * e6, r.r3 * e3 - r.r4 * e4, -r.r8 * e8,
            );
            let rhs = Vector4::new(d, 0.0, d * d, 0.0);
            let sol = m.lu().solve(&rhs).unwrap();
            for (got, want) in [(c.c1, sol[0]), (c.c6, sol[1]), (c.c3, sol[2]), (c.c8, sol[3])] {
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
            }
            assert!(c.c1 > 0.0 && c.c6 < 0.0);
        }
    }

    #[test]
    fn smooth_pasting_and_unit_slope() {
        for (d_bar, gamma) in [(0.05, 0.2), (0.1, 0.4), (0.05, 0.4), (0.1, 0.0)] {
            let p = fig1(d_bar, gamma);
            let (sol, _) = solve(&p).unwrap();
            let f = sol.form();
            let x = sol.x_tilde().unwrap();
            let (gl, gr) = (f.g_jet(x, Side::Left), f.g_jet(x, Side::Right));
            let (hl, hr) = (f.h_jet(x, Side::Left), f.h_jet(x, Side::Right));
            assert!((gl.v - gr.v).abs() <= 1e-10 && (gl.d1 - gr.d1).abs() <= 1e-10);
            assert!((hl.v - hr.v).abs() <= 1e-10 && (hl.d1 - hr.d1).abs() <= 1e-10);
            assert!((f.v_jet(x, Side::Left).d1 - 1.0).abs() <= 1e-8);
            assert!((f.v_jet(x, Side::Right).d1 - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn boundary_values_vanish() {
        let (bar, _) = solve(&fig1(0.05, 0.2)).unwrap();
        let mr = EquilibriumSolution::max_rate(&fig1(0.03, 0.3)).unwrap();
        for sol in [bar, mr] {
            assert_eq!(sol.eval_g(0.0), 0.0);
            assert!(sol.eval_h(0.0).abs() < 1e-16);
            assert!(sol.eval_v(0.0).abs() < 1e-16);
        }
    }

    #[test]
    fn max_rate_value_at_one() {
        let sol = EquilibriumSolution::max_rate(&fig1(0.03, 0.3)).unwrap();
        let r6 = sol.roots().r6;
        assert!((sol.eval_g(1.0) - 0.6 * (1.0 - r6.exp())).abs() < 1e-15);
        assert!((sol.eval_g(1.0) - 0.4836671).abs() < 5e-7);
        assert!(EquilibriumSolution::max_rate(&fig1(0.05, 0.3)).is_err());
    }

    #[test]
    fn far_field_limits() {
        let (bar, _) = solve(&fig1(0.05, 0.2)).unwrap();
        let mr = EquilibriumSolution::max_rate(&fig1(0.03, 0.3)).unwrap();
        for sol in [bar, mr] {
            let r = sol.roots();
            let x = 50.0 * (1.0 / r.r6.abs()).max(1.0 / r.r8.abs());
            let d = sol.params().perpetuity();
            assert!((sol.eval_g(x) - d).abs() < 1e-12);
            assert!((sol.eval_h(x) - d * d).abs() < 1e-12);
            assert!(sol.eval_g(1e5).is_finite() && sol.eval_h(1e5).is_finite());
        }
    }

    #[test]
    fn variance_and_perpetuity_bounds() {
        let mut sols = vec![EquilibriumSolution::max_rate(&fig1(0.03, 0.3)).unwrap()];
        for (d_bar, gamma) in [(0.05, 0.2), (0.1, 0.4), (0.05, 0.0)] {
            sols.push(solve(&fig1(d_bar, gamma)).unwrap().0);
        }
        for sol in sols {
            let d = sol.params().perpetuity();
            for i in 0..=4000 {
                let x = i as f64 * 0.005;
                let (g, h) = (sol.eval_g(x), sol.eval_h(x));
                assert!(h - g * g >= -1e-12, "x = {x}");
                assert!((-1e-15..=d + 1e-12).contains(&g));
                assert!((-1e-15..=d * d + 1e-12).contains(&h));
            }
        }
    }

    #[test]
    fn closed_forms_solve_their_odes() {
        for (d_bar, gamma) in [(0.05, 0.2), (0.1, 0.4)] {
            let p = fig1(d_bar, gamma);
            let (sol, _) = solve(&p).unwrap();
            let x_t = sol.x_tilde().unwrap();
            let (a, b, rho) = (p.a(), p.b(), p.rho());
            for i in 1..3000 {
                let x = i as f64 * 0.004;
                if (x - x_t).abs() < 1e-6 {
                    continue;
                }
                let (g, h, _) = sol.form().jets(x);
                let d = sol.form().rate(x);
                let rg = -rho * g.v + (a - d) * g.d1 + 0.5 * b * b * g.d2 + d;
                let rh = -2.0 * rho * h.v + (a - d) * h.d1 + 0.5 * b * b * h.d2 + 2.0 * d * g.v;
                assert!(rg.abs() <= 1e-8 && rh.abs() <= 1e-8, "x = {x}: {rg} {rh}");
            }
        }
    }

    #[test]
    fn barrier_is_monotone_in_gamma() {
        for d_bar in [0.05, 0.1] {
            let xs: Vec<f64> = (0..=20)
                .map(|i| solve_barrier(&fig1(d_bar, 0.02 * i as f64)).unwrap().unwrap())
                .collect();
            let inc = xs.windows(2).all(|w| w[1] > w[0]);
            let dec = xs.windows(2).all(|w| w[1] < w[0]);
            assert!(inc || dec, "d̄ = {d_bar}: {xs:?}");
        }
        for gamma in [0.0, 0.4] {
            let mut prev = 0.0;
            for i in 0..=14 {
                let d_bar = 0.05 + 0.005 * i as f64;
                let x = solve_barrier(&fig1(d_bar, gamma)).unwrap().unwrap();
                assert!(x > prev, "γ = {gamma}, d̄ = {d_bar}");
                prev = x;
            }
        }
    }

    #[test]
    fn threshold_matches_quadratic_identity() {
        // d̄/ρ = −1/r6 substituted into the r6 quadratic leaves d̄ = ρ b² / (2a).
        let p = fig1(0.05, 0.0);
        let t = payout_threshold(&p).unwrap().unwrap();
        assert!((t - 0.05 * 0.35 * 0.35 / 0.2).abs() < 1e-12);
        let neg = ModelParams::new(-0.1, 0.35, 0.05, 0.05, 0.0).unwrap();
        assert_eq!(payout_threshold(&neg).unwrap(), None);
    }

    #[test]
    fn variance_peak_is_grid_argmax() {
        let p = fig1(0.03, 0.3);
        let r = compute_roots(&p);
        let xm = variance_peak(&r);
        assert!(xm > 0.0);
        let var = |x: f64| (r.r8 * x).exp() - (2.0 * r.r6 * x).exp();
        let (mut best, mut arg) = (f64::MIN, 0.0);
        for i in 0..=200_000 {
            let x = i as f64 * 1e-5;
            if var(x) > best {
                best = var(x);
                arg = x;
            }
        }
        assert!((arg - xm).abs() < 2e-5);
    }

    #[test]
    fn eps_tilde_sandwich() {
        let p = fig1(0.03, 0.0);
        let r = compute_roots(&p);
        assert!(max_rate_v_prime(0.0, 0.0, &r, &p) < 1.0);
        let eps = find_eps_tilde(&p).unwrap();
        assert!(eps.value > 0.0);
        assert!(eps.value <= eps.marginal_bound);
        // γ just below the bound keeps V' ≤ 1 on (0, 2x_m]; just above breaks it.
        let sup = |g: f64| {
            (1..=20_000).map(|i| max_rate_v_prime(i as f64 * eps.x_m * 1e-4, g, &r, &p)).fold(f64::MIN, f64::max)
        };
        assert!(sup(eps.marginal_bound - 1e-3) <= 1.0);
        assert!(sup(eps.marginal_bound + 1e-2) > 1.0);
        assert!(find_eps_tilde(&fig1(0.05, 0.0)).is_err());
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_regime(&fig1(0.05, 0.2)).class, RegimeClass::Barrier);
        assert_eq!(classify_regime(&fig1(0.03, 0.3)).class, RegimeClass::MaxRate);
        assert_eq!(classify_regime(&fig1(0.03, 5.0)).class, RegimeClass::Unresolved);
        assert!(matches!(solve(&fig1(0.03, 10.0)), Err(SolveError::Unresolved { .. })));
    }

    #[test]
    fn single_precision_closed_forms() {
        let p = ModelParams::<f32>::new(0.1, 0.35, 0.05, 0.05, 0.2).unwrap();
        let x = solve_barrier(&p).unwrap().unwrap();
        let x64 = solve_barrier(&fig1(0.05, 0.2)).unwrap().unwrap();
        assert!((x as f64 - x64).abs() < 1e-4);
        let sol = EquilibriumSolution::barrier(&p, x).unwrap();
        assert!((sol.form().v_prime(x) - 1.0).abs() < 1e-3);
    }
}
