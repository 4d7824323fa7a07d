use crate::scalar::Scalar;

/// Interpolation taps for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

// Align-corners sampling: output index i maps to i * (n_in - 1) / (n_out - 1).
fn taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: T::zero(),
                };
            }
            let num = i * (n_in - 1);
            let den = n_out - 1;
            let lo = num / den;
            let rem = num % den;
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(rem as f64 / den as f64),
            }
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let top = &src[ry.lo * w..(ry.lo + 1) * w];
            let bot = &src[ry.hi * w..(ry.hi + 1) * w];
            let wy1 = ry.frac;
            let wy0 = T::one() - wy1;
            for (ox, rx) in tx.iter().enumerate() {
                let wx1 = rx.frac;
                let wx0 = T::one() - wx1;
                let v = wy0 * (wx0 * top[rx.lo] + wx1 * top[rx.hi])
                    + wy1 * (wx0 * bot[rx.lo] + wx1 * bot[rx.hi]);
                dst[oy * ow + ox] = v;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_forward`]: scatters output gradients onto the input grid.
pub fn bilinear_backward<T: Scalar>(
    dy: &[T],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return dy.to_vec();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = vec![T::zero(); channels * h * w];
    for c in 0..channels {
        let src = &dy[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let wy1 = ry.frac;
            let wy0 = T::one() - wy1;
            for (ox, rx) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let wx1 = rx.frac;
                let wx0 = T::one() - wx1;
                dst[ry.lo * w + rx.lo] += g * wy0 * wx0;
                dst[ry.lo * w + rx.hi] += g * wy0 * wx1;
                dst[ry.hi * w + rx.lo] += g * wy1 * wx0;
                dst[ry.hi * w + rx.hi] += g * wy1 * wx1;
            }
        }
    }
    dx
}
