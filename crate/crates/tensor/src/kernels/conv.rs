//! Convolution kernels over single `C x H x W` images.
//!
//! Both directions lower to GEMM through `im2col` / `col2im`. Kernels are
//! applied as cross-correlation (no flip), and `conv_transpose2d` is the
//! exact adjoint of `conv2d` for the same weight tensor and geometry.

use super::gemm::{gemm, MatRef};
use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded 2-D correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit in the padded input or stride is 0.
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input-space index `(iy, ix)` for output `(oy, ox)` at kernel tap `(ki, kj)`.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    let p = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * p];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else {
                        continue;
                    };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`]: accumulates columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    let mut x = vec![T::zero(); g.channels * g.h * g.w];
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else {
                        continue;
                    };
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            dst_row[ix] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Scalar>(dy: &[T], plane: usize) -> Vec<T> {
    dy.chunks(plane).map(|c| c.iter().copied().sum()).collect()
}

/// Forward correlation. `w` is `c_out x (c_in*kh*kw)`; output is `c_out x (oh*ow)`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.col_cols();
    let mut out = vec![T::zero(); c_out * p];
    let wm = MatRef::row_major(w, c_out, g.col_rows());
    if g.is_pointwise() {
        gemm(wm, MatRef::row_major(x, g.channels, p), T::zero(), &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(wm, MatRef::row_major(&cols, g.col_rows(), p), T::zero(), &mut out);
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, p);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    c_out: usize,
    g: &ConvGeom,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let p = g.col_cols();
    let rows = g.col_rows();
    let dym = MatRef::row_major(dy, c_out, p);
    let dx = needs[0].then(|| {
        let mut dcols = vec![T::zero(); rows * p];
        gemm(MatRef::row_major(w, c_out, rows).t(), dym, T::zero(), &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    let dw = needs[1].then(|| {
        let mut dw = vec![T::zero(); c_out * rows];
        if g.is_pointwise() {
            gemm(dym, MatRef::row_major(x, rows, p).t(), T::zero(), &mut dw);
        } else {
            let cols = im2col(x, g);
            gemm(dym, MatRef::row_major(&cols, rows, p).t(), T::zero(), &mut dw);
        }
        dw
    });
    let db = needs[2].then(|| channel_sums(dy, p));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `g` describes the *output* image as a correlation
/// input, so `(g.oh, g.ow)` must equal the spatial size of `x`. `w` is
/// `c_in x (c_out*kh*kw)` where `g.channels == c_out`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * p];
    gemm(
        MatRef::row_major(w, c_in, rows).t(),
        MatRef::row_major(x, c_in, p),
        T::zero(),
        &mut cols,
    );
    let mut out = col2im(&cols, g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.h * g.w);
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    c_in: usize,
    g: &ConvGeom,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let p = g.col_cols();
    let rows = g.col_rows();
    let dcols = (needs[0] || needs[1]).then(|| im2col(dy, g));
    let dx = needs[0].then(|| {
        let mut dx = vec![T::zero(); c_in * p];
        let dcols = dcols.as_deref().expect("dcols computed");
        gemm(
            MatRef::row_major(w, c_in, rows),
            MatRef::row_major(dcols, rows, p),
            T::zero(),
            &mut dx,
        );
        dx
    });
    let dw = needs[1].then(|| {
        let mut dw = vec![T::zero(); c_in * rows];
        let dcols = dcols.as_deref().expect("dcols computed");
        gemm(
            MatRef::row_major(x, c_in, p),
            MatRef::row_major(dcols, rows, p).t(),
            T::zero(),
            &mut dw,
        );
        dw
    });
    let db = needs[2].then(|| channel_sums(dy, g.h * g.w));
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_size() {
        let g = ConvGeom::new(3, 24, 24, 3, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (12, 12));
        assert!(ConvGeom::new(1, 2, 2, 5, 5, 1, 1).is_none());
        assert!(ConvGeom::new(1, 2, 2, 1, 1, 0, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.channels * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = col2im(&c, &g).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
