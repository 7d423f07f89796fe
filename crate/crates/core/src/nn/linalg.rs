/// Strided view of a dense matrix inside a slice: element `(i, j)` is at `i * rs + j * cs`.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` matrix.
    pub const fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)`, single-threaded.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [f32],
    dst_l: Layout,
    accumulate: bool,
    lhs: &[f32],
    lhs_l: Layout,
    rhs: &[f32],
    rhs_l: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(dst.len() >= dst_l.span(m, n), "dst too small");
    assert!(lhs.len() >= lhs_l.span(m, k), "lhs too small");
    assert!(rhs.len() >= rhs_l.span(k, n), "rhs too small");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    dst[i * dst_l.rs + j * dst_l.cs] = 0.0;
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_l.cs as isize,
            dst_l.rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_l.cs as isize,
            lhs_l.rs as isize,
            rhs.as_ptr(),
            rhs_l.cs as isize,
            rhs_l.rs as isize,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}
