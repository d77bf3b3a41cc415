//! Safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn dense(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a dense `[rows × cols]` matrix.
    pub fn dense_t(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = beta·c + a·b` where `a` is `[m × k]`, `b` is `[k × n]`, `c` is `[m × n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(
        av.last_index(m, k) < a.len(),
        "gemm: lhs view out of bounds"
    );
    assert!(
        bv.last_index(k, n) < b.len(),
        "gemm: rhs view out of bounds"
    );
    assert!(
        cv.last_index(m, n) < c.len(),
        "gemm: output view out of bounds"
    );
    // SAFETY: every index touched by dgemm lies in [offset, last_index] of its
    // view, which the asserts above bound by the slice lengths. The output
    // slice is uniquely borrowed, so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}
