//! Thin row-major wrappers around `matrixmultiply::dgemm`.

/// c[m,n] = alpha * a[m,k] . b[k,n] + beta * c, all row-major contiguous.
pub fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
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

/// c[m,n] = alpha * a[m,k] . b^T + beta * c where b is stored row-major [n,k].
pub fn dgemm_bt(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
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

/// c[m,n] = alpha * a^T . b[k,n] + beta * c where a is stored row-major [k,m].
pub fn dgemm_at(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        dgemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (4, 6, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut c_ref = vec![0.0; m * n];
        dgemm(m, k, n, 1.0, &a, &b, 0.0, &mut c_ref);

        // a^T stored as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut c = vec![0.0; m * n];
        dgemm_at(m, k, n, 1.0, &at, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12);
        }

        // b^T stored as [n,k]
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        dgemm_bt(m, k, n, 1.0, &a, &bt, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
