//! Thin wrappers over `matrixmultiply::dgemm` for row-major matrices.

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, all row-major and contiguous.
pub(crate) fn matmul_nn(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slices cover the addressed extents for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = alpha · a[m×k] · bᵀ + beta · c` where `b` is stored `[n×k]`.
pub(crate) fn matmul_nt(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: see `matmul_nn`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = alpha · aᵀ · b[k×n] + beta · c` where `a` is stored `[k×m]`.
pub(crate) fn matmul_tn(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: see `matmul_nn`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Solves `L v = x` in place for lower-triangular `l` (`dim × dim`, row-major).
pub(crate) fn forward_substitute(l: &[f64], dim: usize, x: &mut [f64]) {
    for i in 0..dim {
        let row = &l[i * dim..i * dim + i];
        let s: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] = (x[i] - s) / l[i * dim + i];
    }
}

/// Solves `Lᵀ v = x` in place for lower-triangular `l`.
pub(crate) fn back_substitute_transposed(l: &[f64], dim: usize, x: &mut [f64]) {
    for i in (0..dim).rev() {
        let mut s = 0.0;
        for j in i + 1..dim {
            s += l[j * dim + i] * x[j];
        }
        x[i] = (x[i] - s) / l[i * dim + i];
    }
}
