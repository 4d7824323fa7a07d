use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::scalar::Scalar;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: RwLock<Option<Arc<rayon::ThreadPool>>> = RwLock::new(None);

// Below this many multiply-adds a split is not worth the scheduling cost.
const PARALLEL_MIN_WORK: usize = 1 << 20;

/// Sets the number of worker threads used by the matrix kernels.
///
/// Work is split over disjoint output rows and every output element is
/// reduced in the same order regardless of the split, so results are
/// bitwise identical for any thread count.
pub fn set_num_threads(n: usize) {
    let n = n.max(1);
    THREADS.store(n, Ordering::SeqCst);
    let pool = if n > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .ok()
            .map(Arc::new)
    } else {
        None
    };
    *POOL.write().expect("thread pool lock") = pool;
}

pub fn num_threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a * b + beta * c`, with `c` a row-major `a.rows x b.cols` buffer.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }

    let pool = if m * n * k >= PARALLEL_MIN_WORK && m >= 2 {
        POOL.read().expect("thread pool lock").clone()
    } else {
        None
    };

    match pool {
        Some(pool) => {
            let threads = pool.current_num_threads().max(1);
            let rows_per = m.div_ceil(threads);
            pool.install(|| {
                c.par_chunks_mut(rows_per * n)
                    .enumerate()
                    .for_each(|(i, chunk)| {
                        let r0 = i * rows_per;
                        let rows = chunk.len() / n;
                        let sub = MatRef {
                            data: &a.data[r0 * a.rs..],
                            rows,
                            ..a
                        };
                        gemm_serial(sub, b, beta, chunk);
                    });
            });
        }
        None => gemm_serial(a, b, beta, c),
    }
}

fn gemm_serial<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 {
        return;
    }
    // Bounds: the last element touched in each view must be in range.
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_views_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v % 7) as f64).collect();
        // Store a transposed (k x m) and read it through a transposed view.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(
            MatRef::row_major(&at, k, m).t(),
            MatRef::row_major(&b, k, n),
            0.0,
            &mut c,
        );
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(MatRef::row_major(&a, 1, 2), MatRef::row_major(&b, 2, 1), 1.0, &mut c);
        assert_eq!(c, [21.0]);
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let (m, k, n) = (130, 129, 97);
        let a: Vec<f32> = (0..m * k).map(|v| ((v * 37 % 101) as f32).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|v| ((v * 53 % 89) as f32).cos()).collect();
        let run = || {
            let mut c = vec![0.0f32; m * n];
            gemm(MatRef::row_major(&a, m, k), MatRef::row_major(&b, k, n), 0.0, &mut c);
            c
        };
        set_num_threads(1);
        let serial = run();
        set_num_threads(3);
        let parallel = run();
        set_num_threads(1);
        assert!(serial
            .iter()
            .zip(&parallel)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
