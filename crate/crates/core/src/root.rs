//! Bracketed scalar root refinement (Brent's method).

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RootError {
    #[error("endpoints do not bracket a root: f({lo}) = {f_lo}, f({hi}) = {f_hi}")]
    NotBracketed { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracketed<T> {
    pub root: T,
    pub residual: T,
    /// Width of the final sign-change bracket.
    pub width: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance<T> {
    pub x: T,
    pub f: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for Tolerance<T> {
    fn default() -> Self {
        Self { x: T::lit(1e-10), f: T::lit(1e-12), max_iter: 500 }
    }
}

/// Refines a root of `f` inside `[lo, hi]`.
///
/// Stops once the bracket is narrower than `tol.x` and `|f| ≤ tol.f`, or when
/// the bracket has collapsed to a few ulps.
pub fn brent<T, F>(mut f: F, lo: T, hi: T, tol: Tolerance<T>) -> Result<Bracketed<T>, RootError>
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == T::zero() {
        return Ok(Bracketed { root: a, residual: fa, width: T::zero(), iterations: 0 });
    }
    if fb == T::zero() {
        return Ok(Bracketed { root: b, residual: fb, width: T::zero(), iterations: 0 });
    }
    if (fa > T::zero()) == (fb > T::zero()) {
        return Err(RootError::NotBracketed {
            lo: lo.as_f64(),
            hi: hi.as_f64(),
            f_lo: fa.as_f64(),
            f_hi: fb.as_f64(),
        });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for iter in 1..=tol.max_iter {
        if (fb > T::zero()) == (fc > T::zero()) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let width = (c - b).abs();
        let ulp = T::epsilon() * b.abs().max(T::min_positive_value());
        if fb == T::zero() || (width <= tol.x && fb.abs() <= tol.f) || width <= T::lit(8.0) * ulp {
            return Ok(Bracketed { root: b, residual: fb, width, iterations: iter });
        }
        let tol1 = (two * ulp).max(half * tol.x.min(width) * T::lit(1e-3));
        let xm = half * (c - b);
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = two * xm * s;
                q = T::one() - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (two * xm * qq * (qq - r) - (b - a) * (r - T::one()));
                q = (qq - T::one()) * (r - T::one()) * (s - T::one());
            }
            if p > T::zero() {
                q = -q;
            }
            p = p.abs();
            let min1 = T::lit(3.0) * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if two * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b = if d.abs() > tol1 { b + d } else { b + tol1.copysign(xm) };
        fb = f(b);
    }
    Err(RootError::NoConvergence(tol.max_iter))
}
