//! Complete elliptic integrals by the arithmetic-geometric mean.
//!
//! Parameter convention `m = k^2`. The complementary parameter `m1 = 1 - m`
//! is accepted separately so callers that know it exactly (e.g. from loop
//! geometry) do not lose digits near `m = 1`.

use std::f64::consts::FRAC_PI_2;

const MAX_ITER: usize = 40;

/// AGM iteration returning `K(m)` and `T = sum_{i>=1} 2^i c_i^2`, from which
/// `E = K (1 - m/2 - T/2)` and `(2 - m) K - 2 E = K T` follow without
/// subtractive cancellation.
pub(crate) fn agm_kernel(m: f64, m1: f64) -> (f64, f64) {
    debug_assert!((0.0..=1.0).contains(&m) && m1 > 0.0);
    let mut a = 1.0_f64;
    let mut b = m1.sqrt();
    // a - b, carried separately so it never comes from a difference of
    // nearly equal numbers.
    let mut d = m / (1.0 + b);
    let mut tail = 0.0;
    let mut weight = 2.0;
    for _ in 0..MAX_ITER {
        if d <= 1e-17 * a {
            break;
        }
        let c = 0.5 * d;
        tail += weight * c * c;
        weight *= 2.0;
        let (sa, sb) = (a.sqrt(), b.sqrt());
        let next_d = d * d / (2.0 * (sa + sb) * (sa + sb));
        let next_a = 0.5 * (a + b);
        b = sa * sb;
        a = next_a;
        d = next_d;
    }
    (FRAC_PI_2 / a, tail)
}

/// Complete elliptic integrals `(K(m), E(m))` for `0 <= m < 1`.
pub fn ellip_ke(m: f64) -> (f64, f64) {
    ellip_ke_complement(m, 1.0 - m)
}

/// Same as [`ellip_ke`] with an exactly known complementary parameter.
pub fn ellip_ke_complement(m: f64, m1: f64) -> (f64, f64) {
    let (k, tail) = agm_kernel(m, m1);
    (k, k * (1.0 - 0.5 * m - 0.5 * tail))
}
