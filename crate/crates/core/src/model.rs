//! Problem instance: surplus drift and volatility, discounting, the dividend
//! rate cap and risk aversion, plus the characteristic roots every closed form
//! is built from.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Parameter record as it appears in a JSON configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub d_bar: f64,
    pub gamma: f64,
}

impl RawParams {
    pub fn validate<T: Scalar>(&self) -> Result<ModelParams<T>, ParamError> {
        ModelParams::new(
            T::lit(self.a),
            T::lit(self.b),
            T::lit(self.rho),
            T::lit(self.d_bar),
            T::lit(self.gamma),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParamError {
    #[error("{0} must be finite")]
    NotFinite(&'static str),
    #[error("{0} must be > 0")]
    NotPositive(&'static str),
    #[error("gamma must be ≥ 0")]
    NegativeGamma,
}

/// Validated model parameters.
///
/// The controlled surplus follows `dX = (a - d(X)) dt + b dB`, dividends are
/// discounted at `rho`, paid at a rate in `[0, d_bar]`, and the objective
/// penalises their variance with weight `gamma / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams<T> {
    a: T,
    b: T,
    rho: T,
    d_bar: T,
    gamma: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(a: T, b: T, rho: T, d_bar: T, gamma: T) -> Result<Self, ParamError> {
        for (name, v) in [("a", a), ("b", b), ("rho", rho), ("d_bar", d_bar), ("gamma", gamma)] {
            if !v.is_finite() {
                return Err(ParamError::NotFinite(name));
            }
        }
        for (name, v) in [("b", b), ("rho", rho), ("d_bar", d_bar)] {
            if v <= T::zero() {
                return Err(ParamError::NotPositive(name));
            }
        }
        if gamma < T::zero() {
            return Err(ParamError::NegativeGamma);
        }
        Ok(Self { a, b, rho, d_bar, gamma })
    }

    pub fn a(&self) -> T {
        self.a
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn d_bar(&self) -> T {
        self.d_bar
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn with_gamma(&self, gamma: T) -> Result<Self, ParamError> {
        Self::new(self.a, self.b, self.rho, self.d_bar, gamma)
    }

    pub fn with_d_bar(&self, d_bar: T) -> Result<Self, ParamError> {
        Self::new(self.a, self.b, self.rho, d_bar, self.gamma)
    }

    /// Present value of paying `d_bar` forever, the upper bound on discounted dividends.
    pub fn perpetuity(&self) -> T {
        self.d_bar / self.rho
    }

    pub fn to_raw(&self) -> RawParams {
        RawParams {
            a: self.a.as_f64(),
            b: self.b.as_f64(),
            rho: self.rho.as_f64(),
            d_bar: self.d_bar.as_f64(),
            gamma: self.gamma.as_f64(),
        }
    }
}

/// Roots of `(b²/2) r² + c r − k ρ = 0` as `(positive, negative)`.
///
/// The root without cancellation is computed first and the other one comes
/// from the product `−2kρ/b²`.
pub fn characteristic_pair<T: Scalar>(drift: T, b: T, rho: T, k: T) -> (T, T) {
    let b2 = b * b;
    let disc = (drift * drift + T::lit(2.0) * k * rho * b2).sqrt();
    let product = -T::lit(2.0) * k * rho / b2;
    if drift >= T::zero() {
        let neg = (-drift - disc) / b2;
        (product / neg, neg)
    } else {
        let pos = (-drift + disc) / b2;
        (pos, product / pos)
    }
}

/// The eight characteristic roots.
///
/// `r1, r2` and `r3, r4` belong to drift `a` with discount `ρ` and `2ρ`;
/// `r5, r6` and `r7, r8` to drift `a − d̄`. Odd indices are the positive roots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharRoots<T> {
    pub r1: T,
    pub r2: T,
    pub r3: T,
    pub r4: T,
    pub r5: T,
    pub r6: T,
    pub r7: T,
    pub r8: T,
}

pub fn compute_roots<T: Scalar>(p: &ModelParams<T>) -> CharRoots<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let paid = p.a - p.d_bar;
    let (r1, r2) = characteristic_pair(p.a, p.b, p.rho, one);
    let (r3, r4) = characteristic_pair(p.a, p.b, p.rho, two);
    let (r5, r6) = characteristic_pair(paid, p.b, p.rho, one);
    let (r7, r8) = characteristic_pair(paid, p.b, p.rho, two);
    CharRoots { r1, r2, r3, r4, r5, r6, r7, r8 }
}

impl<T: Scalar> CharRoots<T> {
    pub fn as_array(&self) -> [T; 8] {
        [self.r1, self.r2, self.r3, self.r4, self.r5, self.r6, self.r7, self.r8]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig1() -> ModelParams<f64> {
        ModelParams::new(0.1, 0.35, 0.05, 0.05, 0.2).unwrap()
    }

    fn residual(r: f64, c: f64, b: f64, k_rho: f64) -> f64 {
        0.5 * b * b * r * r + c * r - k_rho
    }

    #[test]
    fn reference_params_validate() {
        let raw = RawParams { a: 0.1, b: 0.35, rho: 0.05, d_bar: 0.05, gamma: 0.2 };
        assert_eq!(raw.validate::<f64>().unwrap(), fig1());
    }

    #[test]
    fn rejects_bad_fields() {
        let raw = RawParams { a: 0.0, b: 0.0, rho: 0.05, d_bar: 0.05, gamma: 0.2 };
        let err = raw.validate::<f64>().unwrap_err();
        assert_eq!(err.to_string(), "b must be > 0");
        let raw = RawParams { gamma: -0.1, ..RawParams { a: 0.1, b: 0.35, rho: 0.05, d_bar: 0.05, gamma: 0.0 } };
        assert_eq!(raw.validate::<f64>().unwrap_err().to_string(), "gamma must be ≥ 0");
        assert_eq!(
            ModelParams::new(f64::NAN, 1.0, 1.0, 1.0, 0.0).unwrap_err(),
            ParamError::NotFinite("a")
        );
        assert_eq!(ModelParams::new(0.1, 1.0, 0.0, 1.0, 0.0).unwrap_err(), ParamError::NotPositive("rho"));
        assert_eq!(ModelParams::new(0.1, 1.0, 1.0, -1.0, 0.0).unwrap_err(), ParamError::NotPositive("d_bar"));
    }

    #[test]
    fn json_keys_are_exact() {
        let p: RawParams =
            serde_json::from_str(r#"{"a":0.1,"b":0.35,"rho":0.05,"d_bar":0.05,"gamma":0.2}"#).unwrap();
        assert_eq!(p.validate::<f64>().unwrap(), fig1());
        assert!(serde_json::from_str::<RawParams>(r#"{"a":0.1,"b":0.35,"rho":0.05,"dbar":0.05,"gamma":0.2}"#).is_err());
    }

    #[test]
    fn symmetric_driftless_roots() {
        let p = ModelParams::<f64>::new(0.0, 1.0, 0.5, 1.0, 0.0).unwrap();
        let r = compute_roots(&p);
        assert!((r.r1 - 1.0).abs() < 1e-15 && (r.r2 + 1.0).abs() < 1e-15);
        assert!((r.r3 - 2f64.sqrt()).abs() < 1e-15 && (r.r4 + 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reference_roots_solve_their_quadratics() {
        // Reference values come from substitution into the quadratic, not from
        // the formula under test.
        let r = compute_roots(&fig1());
        assert!((r.r1 - 0.401342).abs() < 5e-7);
        assert!((r.r2 + 2.033995).abs() < 5e-7);
        assert!(residual(r.r1, 0.1, 0.35, 0.05).abs() < 1e-15);
        assert!(residual(r.r2, 0.1, 0.35, 0.05).abs() < 1e-15);
        let r = compute_roots(&fig1().with_d_bar(0.03).unwrap());
        assert!((r.r6 + 1.6404735).abs() < 5e-8);
        assert!(residual(r.r6, 0.07, 0.35, 0.05).abs() < 1e-15);
    }

    #[test]
    fn r6_increases_towards_zero_in_d_bar() {
        // Less net drift means slower decay of the paying-region solution.
        let base = fig1();
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=200 {
            let r6 = compute_roots(&base.with_d_bar(0.002 * i as f64).unwrap()).r6;
            assert!(r6 > prev && r6 < 0.0);
            prev = r6;
        }
    }

    #[test]
    fn extreme_drift_keeps_small_root_accurate() {
        // a² ≫ 2ρb²: the naive formula loses every digit of the small root.
        let p = ModelParams::new(1e4, 1e-3, 1e-3, 1.0, 0.0).unwrap();
        let r = compute_roots(&p);
        let rel = residual(r.r1, 1e4, 1e-3, 1e-3) / 1e-3;
        assert!(rel.abs() < 1e-12, "{rel}");
        assert!(((r.r1 * r.r2) / (-2.0 * 1e-3 / 1e-6) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn vieta_and_residuals(a in -2.0..2.0f64, b in 0.05..3.0f64, rho in 0.001..1.0f64,
                               d in 0.001..3.0f64) {
            let p = ModelParams::new(a, b, rho, d, 0.0).unwrap();
            let r = compute_roots(&p);
            let b2 = b * b;
            let checks = [
                (r.r1, r.r2, a, 1.0),
                (r.r3, r.r4, a, 2.0),
                (r.r5, r.r6, a - d, 1.0),
                (r.r7, r.r8, a - d, 2.0),
            ];
            for (pos, neg, c, k) in checks {
                prop_assert!(pos > 0.0 && neg < 0.0);
                let prod = -2.0 * k * rho / b2;
                prop_assert!(((pos * neg) / prod - 1.0).abs() <= 1e-12);
                let sum = -2.0 * c / b2;
                let scale = pos.abs().max(neg.abs());
                prop_assert!((pos + neg - sum).abs() <= 1e-12 * scale);
                for root in [pos, neg] {
                    let res = residual(root, c, b, k * rho);
                    prop_assert!((res / rho).abs() <= 1e-12 * (1.0 + (root * root * b2 / rho).abs()));
                }
            }
        }
    }
}
