//! Special-function helpers shared by the inference engines.
//!
//! Thin layer over `statrs` for log-gamma, digamma, and the regularized
//! incomplete gamma, plus a trigamma implementation and a guarded inverse of
//! the Gamma CDF used for quantile (pathwise) sampling.

pub use statrs::function::gamma::{digamma, gamma_lr, ln_gamma};

/// Trigamma function (second derivative of log-gamma) via the recurrence
/// `psi1(x) = psi1(x+1) + 1/x^2` and the asymptotic series for large x.
pub fn trigamma(x: f64) -> f64 {
    assert!(x > 0.0, "trigamma requires a positive argument");
    let mut x = x;
    let mut acc = 0.0;
    while x < 8.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + 1/(6x^3) - 1/(30x^5) + 1/(42x^7) - 1/(30x^9) + 5/(66x^11)
    acc + inv
        + 0.5 * inv2
        + inv2
            * inv
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

/// Log-density of Gamma(shape, rate) at `x > 0`.
pub fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Entropy of Gamma(shape, rate).
pub fn gamma_entropy(shape: f64, rate: f64) -> f64 {
    shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape)
}

/// Solves `P(a, s) = p` for `s`, where `P` is the regularized lower
/// incomplete gamma function; this is the quantile of Gamma(a, rate = 1).
///
/// Newton iterations on a bracketing interval; falls back to bisection when
/// a Newton step leaves the bracket. `p` is clamped away from {0, 1}.
pub fn inv_gamma_p(a: f64, p: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    let p = p.clamp(1e-14, 1.0 - 1e-14);

    // bracket the root starting from the mean
    let mut lo = 0.0_f64;
    let mut hi = a.max(1.0);
    while gamma_lr(a, hi) < p {
        lo = hi;
        hi *= 2.0;
        if hi > 1e305 {
            return hi;
        }
    }

    // initial guess: small-p series for small shapes, mean otherwise
    let mut s = if a < 1.0 {
        let guess = (p * a * ln_gamma(a).exp()).powf(1.0 / a);
        guess.clamp(lo + 1e-300, hi)
    } else {
        a.min(hi).max(lo + 1e-300)
    };

    let ln_gamma_a = ln_gamma(a);
    for _ in 0..100 {
        let f = gamma_lr(a, s) - p;
        if f > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        // pdf of Gamma(a, 1) at s
        let log_pdf = (a - 1.0) * s.ln() - s - ln_gamma_a;
        let step = if log_pdf > -700.0 {
            f / log_pdf.exp()
        } else {
            f64::INFINITY
        };
        let mut next = s - step;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-13 * s.max(1e-30) {
            return next;
        }
        s = next;
    }
    s
}

/// Derivative of the regularized lower incomplete gamma `P(a, s)` with
/// respect to the shape `a`, by central differences.
pub fn d_gamma_p_da(a: f64, s: f64) -> f64 {
    let h = 1e-6 * a.max(1e-3);
    (gamma_lr(a + h, s) - gamma_lr(a - h, s)) / (2.0 * h)
}

/// Log-density of the standard half-Cauchy distribution at `x > 0`.
pub fn half_cauchy_log_pdf(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).ln() - x.mul_add(x, 1.0).ln()
}

/// CDF of the standard half-Cauchy distribution.
pub fn half_cauchy_cdf(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI) * x.atan()
}
