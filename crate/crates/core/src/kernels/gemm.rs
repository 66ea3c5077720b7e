//! Safe wrapper over `matrixmultiply::dgemm`.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is below the maximal strided
    // index checked above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
