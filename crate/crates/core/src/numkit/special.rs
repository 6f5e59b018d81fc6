use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF, Φ(x) = ½·erfc(−x/√2).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Φ for a real argument; alias kept for the public numeric surface.
pub fn gaussian_cdf(x: f64) -> f64 {
    normal_cdf(x)
}
