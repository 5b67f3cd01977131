//! Scalar activations and weight initialisers shared by every model.

use alloc::vec::Vec;
use rand::Rng;

/// SiLU, `x / (1 + e^-x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of [`silu`]: `s(x) * (1 + x * (1 - s(x)))` with `s` the logistic sigmoid.
#[inline]
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Logistic sigmoid, evaluated without overflow for large negative inputs.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Xavier (Glorot) uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    count: usize,
) -> Vec<f64> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(rng, -bound, bound, count)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_reference_points() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(50.0) - 50.0).abs() < 1e-12);
        // 1 / (1 + e^-1) to 15 digits
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(silu(-800.0).is_finite());
    }

    #[test]
    fn silu_deriv_matches_central_difference() {
        for &x in &[-6.0, -1.3, -0.2, 0.0, 0.4, 2.5, 9.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_deriv(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn xavier_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = xavier_uniform(&mut rng, 10, 20, 1000);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > 0.9 * bound));
    }
}
