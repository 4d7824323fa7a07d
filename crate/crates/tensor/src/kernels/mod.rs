//! Plain slice-level forward/backward kernels used by the tape operations.

pub mod conv;
pub mod gemm;
pub mod norm;
pub mod resize;

use crate::scalar::Scalar;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2*pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)` with the standard normal CDF via `erf`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

/// Row-wise softmax over the last axis of length `n`, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(dy: &[T], y: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((g, yv), dst) in dy.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = g.iter().zip(yv).map(|(&a, &b)| a * b).sum();
        for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(yv) {
            *d = yi * (gi - dot);
        }
    }
    dx
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn logsumexp<T: Scalar>(x: impl Iterator<Item = T> + Clone) -> T {
    let max = x.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + x.map(|v| (v - max).exp()).sum::<T>().ln()
}
