//! Element type abstraction: the whole pipeline is generic over `Real`,
//! instantiated with `f64` for numerical tests (finite-difference headroom)
//! and `f32` for training.

use num_traits::Float;

/// Floating-point element type for tensors and model parameters.
pub trait Real:
    Float + Send + Sync + Default + std::fmt::Debug + std::fmt::Display + 'static
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self {
        Self::of(libm::erf(self.to_f64()))
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Standard normal CDF via the error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_value() {
        // erf(1) to 15 digits.
        assert!((1.0f64.erf() - 0.842700792949715).abs() < 1e-14);
        assert!((0.0f64.erf()).abs() < 1e-300);
    }

    #[test]
    fn cdf_symmetry() {
        for x in [-3.0, -0.7, 0.0, 0.2, 2.5] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }
}
