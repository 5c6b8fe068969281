//! Thin wrapper over `matrixmultiply` for the crate's [`Scalar`] type.

use crate::tensor::Scalar;

/// `C = alpha * A * B + beta * C` for an `m x k` by `k x n` product with
/// arbitrary (element) strides. Slices must cover every addressed element.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Scalar,
    a: &[Scalar],
    rsa: usize,
    csa: usize,
    b: &[Scalar],
    rsb: usize,
    csb: usize,
    beta: Scalar,
    c: &mut [Scalar],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: bounds asserted above; the three buffers come from distinct borrows.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `C (m x n) += A (m x k) * B (k x n)`.
pub fn matmul_acc(m: usize, k: usize, n: usize, a: &[Scalar], b: &[Scalar], c: &mut [Scalar]) {
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, 1.0, c, n, 1);
}
