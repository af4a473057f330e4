//! Complete elliptic integrals by the arithmetic–geometric mean.
//!
//! Inputs are the complementary parameter `mc = 1 - m` so that the logarithmic
//! regime `m → 1` is evaluated without cancellation.

use crate::scalar::Real;

const MAX_ITER: usize = 40;

/// Returns `(K(m), E(m))` for `m = 1 - mc`, `mc ∈ (0, 1]`.
pub fn ellip_ke_complement<T: Real>(mc: T) -> (T, T) {
    debug_assert!(mc > T::zero() && mc <= T::one());
    let mut a = T::one();
    let mut b = mc.sqrt();
    let mut c = (T::one() - mc).sqrt();
    // E = K (1 - Σ 2^{n-1} c_n²)
    let mut pow = T::half();
    let mut s = pow * c * c;
    let tol = T::epsilon();
    for _ in 0..MAX_ITER {
        if c.abs() <= tol * a {
            break;
        }
        let a_next = (a + b) * T::half();
        let b_next = (a * b).sqrt();
        c = (a - b) * T::half();
        a = a_next;
        b = b_next;
        pow *= T::two();
        s += pow * c * c;
    }
    let k = T::FRAC_PI_2() / a;
    (k, k * (T::one() - s))
}

/// `K(m)` for `m ∈ [0, 1)`.
pub fn ellipk<T: Real>(m: T) -> T {
    ellip_ke_complement(T::one() - m).0
}

/// `E(m)` for `m ∈ [0, 1)`.
pub fn ellipe<T: Real>(m: T) -> T {
    ellip_ke_complement(T::one() - m).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, QuadOptions};

    fn k_quad(m: f64) -> f64 {
        integrate(
            |t: f64| 1.0 / (1.0 - m * t.sin().powi(2)).sqrt(),
            &[0.0, std::f64::consts::FRAC_PI_2],
            QuadOptions::relative(1e-14),
        )
        .unwrap()
        .value
    }

    fn e_quad(m: f64) -> f64 {
        integrate(
            |t: f64| (1.0 - m * t.sin().powi(2)).sqrt(),
            &[0.0, std::f64::consts::FRAC_PI_2],
            QuadOptions::relative(1e-14),
        )
        .unwrap()
        .value
    }

    #[test]
    fn matches_direct_quadrature() {
        for &m in &[0.0, 0.1, 0.5, 0.9, 0.99] {
            assert!((ellipk(m) - k_quad(m)).abs() < 1e-13, "K({m})");
            assert!((ellipe(m) - e_quad(m)).abs() < 1e-13, "E({m})");
        }
    }

    #[test]
    fn legendre_relation() {
        // E K' + E' K - K K' = π/2
        for &m in &[0.2_f64, 0.5, 0.7] {
            let (k, e) = ellip_ke_complement(1.0 - m);
            let (kp, ep) = ellip_ke_complement(m);
            assert!((e * kp + ep * k - k * kp - std::f64::consts::FRAC_PI_2).abs() < 1e-14);
        }
    }

    #[test]
    fn logarithmic_limit() {
        // K ≈ ln(4/k') as k' → 0
        let mc = 1e-20_f64;
        let (k, e) = ellip_ke_complement(mc);
        assert!((k - (4.0 / mc.sqrt()).ln()).abs() < 1e-15 * 50.0);
        assert!((e - 1.0).abs() < 1e-15);
    }
}
