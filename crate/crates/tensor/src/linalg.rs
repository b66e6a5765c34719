/// Row/column strides of a matrix view, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn t(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `dst[m×n] (+)= a[m×k] · b[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [f32],
    dst_l: Layout,
    accumulate: bool,
    a: &[f32],
    a_l: Layout,
    b: &[f32],
    b_l: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |l: Layout, r: usize, c: usize| (r.saturating_sub(1)) as isize * l.rs + (c.saturating_sub(1)) as isize * l.cs;
    assert!(reach(dst_l, m, n) < dst.len() as isize);
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    dst[(i as isize * dst_l.rs + j as isize * dst_l.cs) as usize] = 0.0;
                }
            }
        }
        return;
    }
    assert!(reach(a_l, m, k) < a.len() as isize);
    assert!(reach(b_l, k, n) < b.len() as isize);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `dst` is uniquely borrowed.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_l.cs,
            dst_l.rs,
            accumulate,
            a.as_ptr(),
            a_l.cs,
            a_l.rs,
            b.as_ptr(),
            b_l.cs,
            b_l.rs,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}
