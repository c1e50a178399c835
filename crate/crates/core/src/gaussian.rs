//! Double-precision Gaussian CDF and the per-symbol interval mass used by both the
//! differentiable rate estimate and the quantized coding tables.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

/// Scale floor for every predicted Gaussian.
pub const SIGMA_MIN: f32 = 0.11;

/// Probability floor applied before taking logarithms (2⁻¹⁶).
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF Φ(x), via `erfc` so both tails keep full relative precision.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of `N(0, σ²)` on `[d − ½, d + ½]`.
///
/// Evaluated on the mirrored negative side so the difference is taken between
/// two small lower-tail values instead of two numbers close to one.
#[inline]
pub fn interval_mass(d: f64, sigma: f64) -> f64 {
    let a = d.abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// Codelength in bits of one element and its partial derivatives with respect to
/// the offset `d = y − w` and the scale `σ`.
///
/// The probability is floored at [`PROB_FLOOR`]; on the floor both derivatives are zero.
#[inline]
pub fn bits_and_grad(d: f64, sigma: f64) -> (f64, f64, f64) {
    let a = d.abs();
    let upper = (0.5 - a) / sigma;
    let lower = (-0.5 - a) / sigma;
    let mass = normal_cdf(upper) - normal_cdf(lower);
    if mass <= PROB_FLOOR {
        return (-PROB_FLOOR.log2(), 0.0, 0.0);
    }
    let (pu, pl) = (normal_pdf(upper), normal_pdf(lower));
    let dmass_da = (pl - pu) / sigma;
    let dmass_dsigma = (lower * pl - upper * pu) / sigma;
    let dbits_dmass = -1.0 / (mass * LN_2);
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    (
        -mass.log2(),
        dbits_dmass * dmass_da * sign,
        dbits_dmass * dmass_dsigma,
    )
}

/// Codelength in bits of one element, with the probability floor applied.
#[inline]
pub fn bits(d: f64, sigma: f64) -> f64 {
    -interval_mass(d, sigma).max(PROB_FLOOR).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the standard normal density: an oracle that
    /// shares nothing with the `erfc` route.
    fn simpson_mass(lo: f64, hi: f64) -> f64 {
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut acc = normal_pdf(lo) + normal_pdf(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * normal_pdf(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[-6.0, -3.3, -1.0, -0.2, 0.0, 0.7, 2.5, 5.0] {
            let oracle = 0.5 + simpson_mass(0.0, x);
            assert!((normal_cdf(x) - oracle).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn unit_sigma_zero_offset() {
        let oracle = -simpson_mass(-0.5, 0.5).log2();
        assert!((oracle - 1.3848).abs() < 1e-4);
        assert!((bits(0.0, 1.0) - oracle).abs() < 1e-10);
    }

    #[test]
    fn sigma_floor_zero_offset() {
        let s = SIGMA_MIN as f64;
        let oracle_mass = simpson_mass(-0.5 / s, 0.5 / s);
        assert!((oracle_mass - 0.999995).abs() < 5e-7);
        let b = bits(0.0, s);
        assert!((b + oracle_mass.log2()).abs() < 1e-9);
        assert!(b > 5e-6 && b < 1e-5, "{b}");
    }

    #[test]
    fn gradients_match_central_differences() {
        for &(d, s) in &[(0.3, 1.0), (-1.7, 0.8), (2.2, 3.0), (0.0, 0.5), (-0.45, 0.2)] {
            let (_, gd, gs) = bits_and_grad(d, s);
            let h = 1e-6;
            let nd = (bits(d + h, s) - bits(d - h, s)) / (2.0 * h);
            let ns = (bits(d, s + h) - bits(d, s - h)) / (2.0 * h);
            assert!((gd - nd).abs() < 1e-5 * (1.0 + nd.abs()), "d {gd} {nd}");
            assert!((gs - ns).abs() < 1e-5 * (1.0 + ns.abs()), "s {gs} {ns}");
        }
    }

    #[test]
    fn floor_kills_gradient() {
        let (b, gd, gs) = bits_and_grad(40.0, 0.2);
        assert_eq!(b, 16.0);
        assert_eq!((gd, gs), (0.0, 0.0));
    }
}
