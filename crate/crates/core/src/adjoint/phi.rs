//! The exponential-integrator weights `φ₁(h) = (e^h − 1)/h` and
//! `φ₂(h) = (e^h − h − 1)/h²`.

/// Below this magnitude the truncated series is used.
pub const SERIES_CUTOFF: f64 = 1e-6;

pub fn phi1(h: f64) -> f64 {
    if h.abs() < SERIES_CUTOFF {
        1.0 + h / 2.0 + h * h / 6.0
    } else {
        h.exp_m1() / h
    }
}

pub fn phi2(h: f64) -> f64 {
    if h.abs() < SERIES_CUTOFF {
        0.5 + h / 6.0 + h * h / 24.0
    } else if h.abs() < 1.0 {
        // e^h − h − 1 cancels badly here even with expm1; sum its Taylor
        // expansion Σ h^k/(k+2)! directly instead.
        let mut term = 0.5;
        let mut sum = 0.5;
        for k in 1..40 {
            term *= h / (k + 2) as f64;
            sum += term;
            if term.abs() <= f64::EPSILON * 1e-3 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        (h.exp_m1() - h) / (h * h)
    }
}
