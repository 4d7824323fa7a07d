//! Differentiable operations recorded on a [`Tape`].

use crate::error::{invalid, Result, TensorError};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::gemm::{gemm, MatRef};
use crate::kernels::{self, norm, resize};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank<T: Scalar>(op: &'static str, v: &Var<T>, rank: usize) -> Result<()> {
    if v.shape().len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            got: v.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_shape<T: Scalar>(op: &'static str, v: &Var<T>, shape: &[usize]) -> Result<()> {
    if v.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok(())
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(shape.to_vec(), data)
}

fn matmul_raw<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let mut c = vec![T::zero(); a.rows * b.cols];
    gemm(a, b, T::zero(), &mut c);
    c
}

/// Sums `g` (viewed as rows of length `n`) over its rows.
fn column_sums<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let value = a.value().zip_map(b.value(), |x, y| x + y)?;
        self.record("add", &[a, b], value, || {
            Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())]))
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let value = a.value().zip_map(b.value(), |x, y| x - y)?;
        self.record("sub", &[a, b], value, || {
            Box::new(|g, needs| {
                Ok(vec![
                    Some(g.clone()),
                    needs[1].then(|| g.map(|v| -v)),
                ])
            })
        })
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let value = a.value().zip_map(b.value(), |x, y| x * y)?;
        let (av, bv) = (a.value().clone(), b.value().clone());
        self.record("mul", &[a, b], value, move || {
            Box::new(move |g, needs| {
                Ok(vec![
                    if needs[0] { Some(g.zip_map(&bv, |x, y| x * y)?) } else { None },
                    if needs[1] { Some(g.zip_map(&av, |x, y| x * y)?) } else { None },
                ])
            })
        })
    }

    pub fn scale(&self, a: &Var<T>, factor: T) -> Result<Var<T>> {
        let value = a.value().map(|v| v * factor);
        self.record("scale", &[a], value, move || {
            Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * factor))]))
        })
    }

    pub fn add_scalar(&self, a: &Var<T>, offset: T) -> Result<Var<T>> {
        let value = a.value().map(|v| v + offset);
        self.record("add_scalar", &[a], value, || {
            Box::new(|g, _| Ok(vec![Some(g.clone())]))
        })
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_bias(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("add_bias", b, 1)?;
        let n = b.shape()[0];
        if x.shape().last() != Some(&n) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.value().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.value().data()) {
                *o += bv;
            }
        }
        let value = tensor(x.shape(), out);
        self.record("add_bias", &[x, b], value, move || {
            Box::new(move |g, needs| {
                Ok(vec![
                    Some(g.clone()),
                    needs[1].then(|| tensor(&[n], column_sums(g.data(), n))),
                ])
            })
        })
    }

    /// Per-channel affine map `y[c] = x[c] * scale[c] + shift[c]` on `C x H x W`.
    pub fn channel_affine(&self, x: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Result<Var<T>> {
        expect_rank("channel_affine", x, 3)?;
        let c = x.shape()[0];
        expect_shape("channel_affine", scale, &[c])?;
        expect_shape("channel_affine", shift, &[c])?;
        let plane = x.shape()[1] * x.shape()[2];
        let mut out = x.value().to_vec();
        for ((chunk, &s), &t) in out
            .chunks_mut(plane.max(1))
            .zip(scale.value().data())
            .zip(shift.value().data())
        {
            for v in chunk {
                *v = *v * s + t;
            }
        }
        let value = tensor(x.shape(), out);
        let (xv, sv) = (x.value().clone(), scale.value().clone());
        self.record("channel_affine", &[x, scale, shift], value, move || {
            Box::new(move |g, needs| {
                let plane = plane.max(1);
                let dx = needs[0].then(|| {
                    let mut d = g.to_vec();
                    for (chunk, &s) in d.chunks_mut(plane).zip(sv.data()) {
                        for v in chunk {
                            *v *= s;
                        }
                    }
                    tensor(xv.shape(), d)
                });
                let ds = needs[1].then(|| {
                    let sums = g
                        .data()
                        .chunks(plane)
                        .zip(xv.data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    tensor(&[c], sums)
                });
                let dt = needs[2].then(|| {
                    tensor(&[c], g.data().chunks(plane).map(|gc| gc.iter().copied().sum()).collect())
                });
                Ok(vec![dx, ds, dt])
            })
        })
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = x.value().map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let xv = x.value().clone();
        self.record("relu", &[x], value, move || {
            Box::new(move |g, _| {
                Ok(vec![Some(g.zip_map(&xv, |gi, xi| {
                    if xi > T::zero() {
                        gi
                    } else {
                        T::zero()
                    }
                })?)])
            })
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = x.value().map(kernels::gelu);
        let xv = x.value().clone();
        self.record("gelu", &[x], value, move || {
            Box::new(move |g, _| Ok(vec![Some(g.zip_map(&xv, |gi, xi| gi * kernels::gelu_grad(xi))?)]))
        })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = Tensor::scalar(x.value().sum());
        let shape = x.shape().to_vec();
        self.record("sum", &[x], value, move || {
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))]))
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value().numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let inv = T::one() / T::lit(n as f64);
        let value = Tensor::scalar(x.value().sum() * inv);
        let shape = x.shape().to_vec();
        self.record("mean", &[x], value, move || {
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0] * inv))]))
        })
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let value = x.value().reshape(shape)?;
        let orig = x.shape().to_vec();
        self.record("reshape", &[x], value, move || {
            Box::new(move |g, _| Ok(vec![Some(g.reshape(&orig)?)]))
        })
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, x: &Var<T>) -> Result<Var<T>> {
        expect_rank("transpose", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let value = tensor(&[n, m], transpose_raw(x.value().data(), m, n));
        self.record("transpose", &[x], value, move || {
            Box::new(move |g, _| Ok(vec![Some(tensor(&[m, n], transpose_raw(g.data(), n, m)))]))
        })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, x: &Var<T>, start: usize, end: usize) -> Result<Var<T>> {
        expect_rank("slice_rows", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if start > end || end > m {
            return Err(invalid("slice_rows", format!("range {start}..{end} outside {m} rows")));
        }
        let value = tensor(&[end - start, n], x.value().data()[start * n..end * n].to_vec());
        self.record("slice_rows", &[x], value, move || {
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); m * n];
                d[start * n..end * n].copy_from_slice(g.data());
                Ok(vec![Some(tensor(&[m, n], d))])
            })
        })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, x: &Var<T>, start: usize, end: usize) -> Result<Var<T>> {
        expect_rank("slice_cols", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if start > end || end > n {
            return Err(invalid("slice_cols", format!("range {start}..{end} outside {n} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in x.value().data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = tensor(&[m, w], out);
        self.record("slice_cols", &[x], value, move || {
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); m * n];
                for (dst, src) in d.chunks_mut(n).zip(g.data().chunks(w.max(1))) {
                    dst[start..end].copy_from_slice(&src[..w]);
                }
                Ok(vec![Some(tensor(&[m, n], d))])
            })
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat_rows", "no inputs"));
        };
        let n = first.shape().get(1).copied().unwrap_or(0);
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            expect_rank("concat_rows", p, 2)?;
            if p.shape()[1] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows.push(p.shape()[0]);
        }
        let total: usize = rows.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(p.value().data());
        }
        let value = tensor(&[total, n], out);
        self.record("concat_rows", parts, value, move || {
            Box::new(move |g, needs| {
                let mut offset = 0;
                Ok(rows
                    .iter()
                    .zip(needs)
                    .map(|(&r, &need)| {
                        let part = need.then(|| tensor(&[r, n], g.data()[offset * n..(offset + r) * n].to_vec()));
                        offset += r;
                        part
                    })
                    .collect())
            })
        })
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat_cols", "no inputs"));
        };
        let m = first.shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            expect_rank("concat_cols", p, 2)?;
            if p.shape()[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value().data()[i * w..(i + 1) * w]);
            }
        }
        let value = tensor(&[m, total], out);
        self.record("concat_cols", parts, value, move || {
            Box::new(move |g, needs| {
                let mut offset = 0;
                Ok(widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let part = need.then(|| {
                            let mut d = Vec::with_capacity(m * w);
                            for row in g.data().chunks(total) {
                                d.extend_from_slice(&row[offset..offset + w]);
                            }
                            tensor(&[m, w], d)
                        });
                        offset += w;
                        part
                    })
                    .collect())
            })
        })
    }

    /// Repeats a `1 x N` row `rows` times.
    pub fn broadcast_rows(&self, x: &Var<T>, rows: usize) -> Result<Var<T>> {
        expect_rank("broadcast_rows", x, 2)?;
        if x.shape()[0] != 1 {
            return Err(invalid("broadcast_rows", format!("expected a single row, got {:?}", x.shape())));
        }
        let n = x.shape()[1];
        let value = tensor(&[rows, n], x.value().data().repeat(rows));
        self.record("broadcast_rows", &[x], value, move || {
            Box::new(move |g, _| Ok(vec![Some(tensor(&[1, n], column_sums(g.data(), n)))]))
        })
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("matmul", a, 2)?;
        expect_rank("matmul", b, 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_raw(
            MatRef::row_major(a.value().data(), m, k),
            MatRef::row_major(b.value().data(), k, n),
        );
        let value = tensor(&[m, n], out);
        let (av, bv) = (a.value().clone(), b.value().clone());
        self.record("matmul", &[a, b], value, move || {
            Box::new(move |g, needs| {
                let gm = MatRef::row_major(g.data(), m, n);
                let da = needs[0].then(|| {
                    tensor(&[m, k], matmul_raw(gm, MatRef::row_major(bv.data(), k, n).t()))
                });
                let db = needs[1].then(|| {
                    tensor(&[k, n], matmul_raw(MatRef::row_major(av.data(), m, k).t(), gm))
                });
                Ok(vec![da, db])
            })
        })
    }

    // ---- normalization / activation over the last axis -------------------

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = *x.shape().last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
        if n == 0 {
            return Err(invalid("softmax", "empty last axis"));
        }
        let value = tensor(x.shape(), kernels::softmax_rows(x.value().data(), n));
        let y = value.clone();
        self.record("softmax", &[x], value, move || {
            Box::new(move |g, _| {
                Ok(vec![Some(tensor(
                    y.shape(),
                    kernels::softmax_rows_backward(g.data(), y.data(), n),
                ))])
            })
        })
    }

    /// Layer norm over the last axis with per-feature affine parameters.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let d = *x.shape().last().ok_or_else(|| invalid("layer_norm", "rank-0 input"))?;
        expect_shape("layer_norm", gamma, &[d])?;
        expect_shape("layer_norm", beta, &[d])?;
        let (xhat, inv_std) = norm::normalize(x.value().data(), d, eps);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, &g), &b) in row.iter_mut().zip(gamma.value().data()).zip(beta.value().data()) {
                *o = *o * g + b;
            }
        }
        let value = tensor(x.shape(), out);
        let shape = x.shape().to_vec();
        let gv = gamma.value().clone();
        self.record("layer_norm", &[x, gamma, beta], value, move || {
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dxhat = g.to_vec();
                    for row in dxhat.chunks_mut(d) {
                        for (v, &gm) in row.iter_mut().zip(gv.data()) {
                            *v *= gm;
                        }
                    }
                    tensor(&shape, norm::normalize_backward(&dxhat, &xhat, &inv_std, d))
                });
                let dgamma = needs[1].then(|| {
                    let prod: Vec<T> = g.data().iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                    tensor(&[d], column_sums(&prod, d))
                });
                let dbeta = needs[2].then(|| tensor(&[d], column_sums(g.data(), d)));
                Ok(vec![dx, dgamma, dbeta])
            })
        })
    }

    /// Group norm on `C x H x W`: statistics per group of `C/groups` channels
    /// over all spatial positions, affine per channel.
    pub fn group_norm(
        &self,
        x: &Var<T>,
        groups: usize,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<Var<T>> {
        expect_rank("group_norm", x, 3)?;
        let c = x.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        expect_shape("group_norm", gamma, &[c])?;
        expect_shape("group_norm", beta, &[c])?;
        let plane = x.shape()[1] * x.shape()[2];
        let group = (c / groups) * plane;
        if group == 0 {
            return Err(invalid("group_norm", "empty spatial extent"));
        }
        let (xhat, inv_std) = norm::normalize(x.value().data(), group, eps);
        let normalized = self.record("group_norm", &[x], tensor(x.shape(), xhat.clone()), move || {
            Box::new(move |g, _| {
                Ok(vec![Some(tensor(
                    g.shape(),
                    norm::normalize_backward(g.data(), &xhat, &inv_std, group),
                ))])
            })
        })?;
        self.channel_affine(&normalized, gamma, beta)
    }

    /// Standardizes each output filter of `C_out x ...` to zero mean, unit variance.
    pub fn weight_standardize(&self, w: &Var<T>, eps: T) -> Result<Var<T>> {
        let c_out = *w.shape().first().ok_or_else(|| invalid("weight_standardize", "rank-0 input"))?;
        let fan_in = w.value().numel() / c_out.max(1);
        if c_out == 0 || fan_in == 0 {
            return Err(invalid("weight_standardize", "empty filter"));
        }
        let (what, inv_std) = norm::normalize(w.value().data(), fan_in, eps);
        let value = tensor(w.shape(), what.clone());
        self.record("weight_standardize", &[w], value, move || {
            Box::new(move |g, _| {
                Ok(vec![Some(tensor(
                    g.shape(),
                    norm::normalize_backward(g.data(), &what, &inv_std, fan_in),
                ))])
            })
        })
    }

    // ---- spatial ----------------------------------------------------------

    /// 2-D cross-correlation of a `C_in x H x W` image with `C_out x C_in x kh x kw` filters.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        expect_rank("conv2d", x, 3)?;
        expect_rank("conv2d", w, 4)?;
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            expect_shape("conv2d", b, &[c_out])?;
        }
        let g = ConvGeom::new(c_in, h, wd, kh, kw, stride, padding).ok_or_else(|| {
            invalid(
                "conv2d",
                format!("kernel {kh}x{kw} (stride {stride}) does not fit {h}x{wd} input with padding {padding}"),
            )
        })?;
        let out = conv::conv2d_forward(
            x.value().data(),
            w.value().data(),
            bias.map(|b| b.value().data()),
            c_out,
            &g,
        );
        let value = tensor(&[c_out, g.oh, g.ow], out);
        let (xv, wv) = (x.value().clone(), w.value().clone());
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record("conv2d", &inputs, value, move || {
            Box::new(move |gy, needs| {
                let grads = conv::conv2d_backward(
                    gy.data(),
                    xv.data(),
                    wv.data(),
                    c_out,
                    &g,
                    [needs[0], needs[1], has_bias && needs[2]],
                );
                let mut out = vec![
                    grads.dx.map(|d| tensor(xv.shape(), d)),
                    grads.dw.map(|d| tensor(wv.shape(), d)),
                ];
                if has_bias {
                    out.push(grads.db.map(|d| tensor(&[c_out], d)));
                }
                Ok(out)
            })
        })
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`]) with
    /// `C_in x C_out x kh x kw` weights. Output extent per axis is
    /// `(n - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<T>> {
        expect_rank("conv_transpose2d", x, 3)?;
        expect_rank("conv_transpose2d", w, 4)?;
        if stride == 0 || output_padding >= stride {
            return Err(invalid(
                "conv_transpose2d",
                format!("output_padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (wc, c_out, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            expect_shape("conv_transpose2d", b, &[c_out])?;
        }
        let extent = |n: usize, k: usize| -> Option<usize> {
            let full = (n.checked_sub(1)?) * stride + k + output_padding;
            full.checked_sub(2 * padding).filter(|&v| v > 0)
        };
        let (oh, ow) = match (extent(h, kh), extent(wd, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(invalid(
                    "conv_transpose2d",
                    format!("padding {padding} leaves no output for {h}x{wd} input"),
                ))
            }
        };
        let g = ConvGeom::new(c_out, oh, ow, kh, kw, stride, padding)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| invalid("conv_transpose2d", "inconsistent geometry"))?;
        let out = conv::conv_transpose2d_forward(
            x.value().data(),
            w.value().data(),
            bias.map(|b| b.value().data()),
            c_in,
            &g,
        );
        let value = tensor(&[c_out, oh, ow], out);
        let (xv, wv) = (x.value().clone(), w.value().clone());
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record("conv_transpose2d", &inputs, value, move || {
            Box::new(move |gy, needs| {
                let grads = conv::conv_transpose2d_backward(
                    gy.data(),
                    xv.data(),
                    wv.data(),
                    c_in,
                    &g,
                    [needs[0], needs[1], has_bias && needs[2]],
                );
                let mut out = vec![
                    grads.dx.map(|d| tensor(xv.shape(), d)),
                    grads.dw.map(|d| tensor(wv.shape(), d)),
                ];
                if has_bias {
                    out.push(grads.db.map(|d| tensor(&[c_out], d)));
                }
                Ok(out)
            })
        })
    }

    /// Align-corners bilinear resize of a `C x H x W` map. Resizing to the
    /// same extent returns the input unchanged.
    pub fn bilinear_resize(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        expect_rank("bilinear_resize", x, 3)?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", "zero-sized target"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h == 0 || w == 0 {
            return Err(invalid("bilinear_resize", "zero-sized input"));
        }
        let out = resize::bilinear_forward(x.value().data(), c, h, w, out_h, out_w);
        let value = tensor(&[c, out_h, out_w], out);
        self.record("bilinear_resize", &[x], value, move || {
            Box::new(move |g, _| {
                Ok(vec![Some(tensor(
                    &[c, h, w],
                    resize::bilinear_backward(g.data(), c, h, w, out_h, out_w),
                ))])
            })
        })
    }

    // ---- losses ---------------------------------------------------------

    /// Mean cross-entropy of `C x H x W` logits against per-pixel labels;
    /// `None` labels are ignored.
    pub fn cross_entropy(&self, logits: &Var<T>, labels: &[Option<usize>]) -> Result<Var<T>> {
        expect_rank("cross_entropy", logits, 3)?;
        let c = logits.shape()[0];
        let plane = logits.shape()[1] * logits.shape()[2];
        if labels.len() != plane {
            return Err(invalid(
                "cross_entropy",
                format!("{} labels for {plane} pixels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
            return Err(invalid("cross_entropy", format!("label {bad} outside {c} classes")));
        }
        let valid = labels.iter().flatten().count();
        if valid == 0 {
            return Err(invalid("cross_entropy", "all pixels ignored"));
        }
        let data = logits.value().data();
        let column = |p: usize| (0..c).map(move |k| data[k * plane + p]);
        let mut total = T::zero();
        for (p, label) in labels.iter().enumerate() {
            if let Some(l) = label {
                total += kernels::logsumexp(column(p)) - data[l * plane + p];
            }
        }
        let inv = T::one() / T::lit(valid as f64);
        let value = Tensor::scalar(total * inv);
        let lv = logits.value().clone();
        let labels = labels.to_vec();
        self.record("cross_entropy", &[logits], value, move || {
            Box::new(move |g, _| {
                let scale = g.data()[0] * inv;
                let data = lv.data();
                let mut d = vec![T::zero(); data.len()];
                for (p, label) in labels.iter().enumerate() {
                    let Some(l) = label else { continue };
                    let lse = kernels::logsumexp((0..c).map(|k| data[k * plane + p]));
                    for k in 0..c {
                        let prob = (data[k * plane + p] - lse).exp();
                        let target = if k == *l { T::one() } else { T::zero() };
                        d[k * plane + p] = (prob - target) * scale;
                    }
                }
                Ok(vec![Some(tensor(lv.shape(), d))])
            })
        })
    }

    /// Mean squared error over the masked-in elements.
    pub fn masked_mse(&self, pred: &Var<T>, target: &Var<T>, mask: &[bool]) -> Result<Var<T>> {
        same_shape("masked_mse", pred, target)?;
        if mask.len() != pred.value().numel() {
            return Err(invalid(
                "masked_mse",
                format!("mask has {} entries for {} elements", mask.len(), pred.value().numel()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid("masked_mse", "empty mask"));
        }
        let inv = T::one() / T::lit(count as f64);
        let diff: Vec<T> = pred
            .value()
            .data()
            .iter()
            .zip(target.value().data())
            .zip(mask)
            .map(|((&p, &t), &m)| if m { p - t } else { T::zero() })
            .collect();
        let value = Tensor::scalar(diff.iter().map(|&d| d * d).sum::<T>() * inv);
        let shape = pred.shape().to_vec();
        self.record("masked_mse", &[pred, target], value, move || {
            Box::new(move |g, needs| {
                let k = T::lit(2.0) * inv * g.data()[0];
                let dp: Vec<T> = diff.iter().map(|&d| d * k).collect();
                let dt = needs[1].then(|| tensor(&shape, dp.iter().map(|&v| -v).collect()));
                Ok(vec![Some(tensor(&shape, dp)), dt])
            })
        })
    }
}

fn transpose_raw<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
