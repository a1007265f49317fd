#![allow(dead_code)]

use mvdiv::ModelParams;

/// The reference parameters `a = 0.1, b = 0.35, ρ = 0.05` with the given cap and risk aversion.
pub fn reference(d_bar: f64, gamma: f64) -> ModelParams<f64> {
    ModelParams::new(0.1, 0.35, 0.05, d_bar, gamma).unwrap()
}

/// P(τ ≤ t) for `x0 + a s + b W_s`, by integrating the inverse-Gaussian
/// first-passage density in log time with composite Simpson.
pub fn first_passage_cdf(a: f64, b: f64, x0: f64, t: f64) -> f64 {
    let density = |s: f64| {
        x0 / (b * (2.0 * std::f64::consts::PI * s * s * s).sqrt()) * (-(x0 + a * s).powi(2) / (2.0 * b * b * s)).exp()
    };
    let (lo, hi) = ((1e-9f64).ln(), t.ln());
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let u = lo + h * i as f64;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * density(u.exp()) * u.exp();
    }
    acc * h / 3.0
}
