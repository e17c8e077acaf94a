//! Log-gamma, digamma and trigamma for positive arguments.
//!
//! All three shift the argument upward with the recurrence until it is at
//! least [`SHIFT_THRESHOLD`], then apply the Stirling-type asymptotic series.
//! Concentration parameters are always `>= 1`, so the reflection formula is
//! never needed; non-positive arguments return NaN.

const SHIFT_THRESHOLD: f64 = 8.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// B_{2k} / (2k (2k-1)) for k = 1..7.
const LN_GAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
];

/// B_{2k} / 2k for k = 1..7.
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
];

/// B_{2k} for k = 1..7.
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut z = x;
    let mut product = 1.0;
    while z < SHIFT_THRESHOLD {
        product *= z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv;
    for c in LN_GAMMA_SERIES {
        series += c * power;
        power *= inv2;
    }
    (z - 0.5) * z.ln() - z + HALF_LN_2PI + series - product.ln()
}

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT_THRESHOLD {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut power = inv2;
    for c in DIGAMMA_SERIES {
        series += c * power;
        power *= inv2;
    }
    acc + z.ln() - 0.5 / z - series
}

/// ψ'(x) for x > 0; the derivative used by the digamma backward rule.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT_THRESHOLD {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv2 * inv;
    for c in TRIGAMMA_SERIES {
        series += c * power;
        power *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn integer_points() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-14);
        assert!((digamma(2.0) - (1.0 - EULER_GAMMA)).abs() < 1e-14);
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n={n}");
            fact *= n as f64;
        }
        // ψ'(1) = π²/6
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-13);
    }

    #[test]
    fn half_integer() {
        // Γ(1/2) = √π, ψ(1/2) = -γ - 2 ln 2
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((ln_gamma(0.5) - sqrt_pi.ln()).abs() < 1e-13);
        assert!((digamma(0.5) + EULER_GAMMA + 2.0 * 2f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn trigamma_matches_difference_quotient() {
        for &x in &[1.05, 2.5, 7.9, 8.1, 40.0] {
            let h = 1e-5;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() / trigamma(x) < 1e-7, "x={x}");
        }
    }

    #[test]
    fn non_positive_is_nan() {
        assert!(digamma(0.0).is_nan());
        assert!(ln_gamma(-1.5).is_nan());
        assert!(trigamma(f64::NAN).is_nan());
    }
}
