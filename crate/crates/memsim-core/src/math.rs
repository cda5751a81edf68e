//! Float helpers that work with and without `std`.
//!
//! Under `std` these forward to the inherent `f64` methods; under `no_std`
//! they go through `libm`. Keeping one call site per function means every
//! build uses a single, fixed sequence of floating-point operations.

#[cfg(feature = "std")]
#[inline]
pub fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(all(not(feature = "std"), feature = "libm"))]
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
#[inline]
pub fn ln(x: f64) -> f64 {
    x.ln()
}

#[cfg(all(not(feature = "std"), feature = "libm"))]
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[cfg(feature = "std")]
#[inline]
pub fn sqrt(x: f64) -> f64 {
    x.sqrt()
}

#[cfg(all(not(feature = "std"), feature = "libm"))]
#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        x
    }
}

/// Euclidean norm, accumulated left to right.
pub fn l2_norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

/// Population mean and standard deviation of a slice.
///
/// Returns `(0.0, 0.0)` for an empty slice. The standard deviation is the
/// population form (divide by `n`, not `n - 1`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m, 0.5);
        assert_eq!(s, 0.5);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        let (_, s) = mean_std(&[3.0, 3.0, 3.0]);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn abs_matches_std() {
        assert_eq!(abs(-2.5), 2.5);
        assert_eq!(abs(2.5), 2.5);
        assert_eq!(abs(0.0), 0.0);
    }
}
