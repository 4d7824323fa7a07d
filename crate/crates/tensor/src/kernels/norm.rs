use crate::scalar::Scalar;

/// Standardizes consecutive groups of `group` elements to zero mean and unit
/// (population) variance. Returns the normalized values and `1/sqrt(var+eps)`
/// per group.
pub fn normalize<T: Scalar>(x: &[T], group: usize, eps: T) -> (Vec<T>, Vec<T>) {
    debug_assert!(group > 0 && x.len() % group == 0);
    let n = T::lit(group as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / group);
    for (src, dst) in x.chunks(group).zip(xhat.chunks_mut(group)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

/// Gradient of [`normalize`] given the upstream gradient w.r.t. its output.
pub fn normalize_backward<T: Scalar>(dxhat: &[T], xhat: &[T], inv_std: &[T], group: usize) -> Vec<T> {
    let n = T::lit(group as f64);
    let mut dx = vec![T::zero(); dxhat.len()];
    for (((g, xh), dst), &is) in dxhat
        .chunks(group)
        .zip(xhat.chunks(group))
        .zip(dx.chunks_mut(group))
        .zip(inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(xh) {
            *d = is * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_elements_map_to_minus_one_plus_one() {
        let (xhat, _) = normalize(&[1.0f64, 3.0], 2, 0.0);
        assert_eq!(xhat, vec![-1.0, 1.0]);
    }

    #[test]
    fn constant_group_is_zero() {
        let (xhat, _) = normalize(&[5.0f32; 6], 3, 1e-6);
        assert!(xhat.iter().all(|&v| v == 0.0));
    }
}
