use super::Scalar;

/// Row-major matrix view with an optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T: Scalar> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            trans: !self.trans,
            ..self
        }
    }

    /// Logical (rows, cols) after the transpose flag.
    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

// Below this many multiply-adds the packing overhead of the blocked kernel
// dominates.
const SMALL_GEMM: usize = 2048;

/// `out (+)= a * b`; accumulates when `accumulate` is set.
pub(crate) fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.data.len(), a.rows * a.cols);
    debug_assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    if m * n * k <= SMALL_GEMM {
        small_gemm(a, b, out, accumulate, (m, k, n));
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: dimensions and strides were derived from slices whose lengths
    // are checked above; `out` does not alias the inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unblocked product; the inner loop runs over contiguous rows of `b` and
/// `out`, transposing `b` first when needed.
fn small_gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool, (m, k, n): (usize, usize, usize)) {
    let transposed;
    let bdata = if b.trans {
        // stored [n, k]
        let mut t = Vec::with_capacity(k * n);
        for p in 0..k {
            t.extend(b.data.chunks_exact(k).map(|row| row[p]));
        }
        transposed = t;
        &transposed[..]
    } else {
        b.data
    };
    if !accumulate {
        out.fill(T::zero());
    }
    let dims = (m, k, n);
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the features enabled on `axpy_rows_avx2`.
        unsafe { axpy_rows_avx2(a.data, a.trans, bdata, out, dims) };
        return;
    }
    axpy_rows(a.data, a.trans, bdata, out, dims);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_rows_avx2<T: Scalar>(a: &[T], a_trans: bool, b: &[T], out: &mut [T], dims: (usize, usize, usize)) {
    axpy_rows(a, a_trans, b, out, dims);
}

#[inline(always)]
fn axpy_rows<T: Scalar>(a: &[T], a_trans: bool, b: &[T], out: &mut [T], (m, k, n): (usize, usize, usize)) {
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        if a_trans {
            for (brow, &av) in b.chunks_exact(n).zip(a[i..].iter().step_by(m)) {
                axpy(row, av, brow);
            }
        } else {
            for (brow, &av) in b.chunks_exact(n).zip(&a[i * k..(i + 1) * k]) {
                axpy(row, av, brow);
            }
        }
    }
}

#[inline(always)]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}
