//! Strided f64 matrix multiply, the single compute kernel behind conv2d
//! and dense layers.

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c[m,n]` with explicit strides.
///
/// Thin checked wrapper over `matrixmultiply::dgemm`. Strides are in
/// elements and may describe transposed views; the kernel packs internally.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Highest touched index per operand must be in bounds.
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    unsafe {
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

/// Row-major convenience: `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c`.
pub fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    dgemm(m, k, n, alpha, a, k, 1, b, n, 1, beta, c, n, 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matmul_matches_hand_result() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        dgemm_rowmajor(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_view_via_strides() {
        // aT where a is 2x3 row-major: strides (1, 3) read it as 3x2.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]; // 2x3... use identity-ish 2x2
        let mut c = vec![0.0; 6];
        // c[3,2] = aT[3,2] * I[2,2]
        dgemm(3, 2, 2, 1.0, &a, 1, 3, &b[..4], 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
