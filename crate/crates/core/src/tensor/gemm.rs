//! Thin wrapper over `matrixmultiply::sgemm` for row-major f32 matrices.

/// How a logical matrix is laid out in its backing slice.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Logical `[rows, cols]` stored row-major as `rows x cols`.
    RowMajor,
    /// Logical `[rows, cols]` stored as the row-major transpose
    /// (`cols x rows`), i.e. element `(i, j)` lives at `j * rows + i`.
    Transposed,
}

/// C[m,n] = A[m,k] * B[k,n] + beta * C, with C dense row-major.
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
