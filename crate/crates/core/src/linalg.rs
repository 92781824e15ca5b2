//! Dense f64 kernels used throughout the crate.
//!
//! All loops have a fixed iteration order, so results are bit-reproducible
//! regardless of build flags or thread counts (nothing here is threaded).

/// C += A (m x k) * B (k x n), all row-major.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C = A * B.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(&mut c, a, b, m, k, n);
    c
}

/// C += A^T (a is k x m) * B (k x n): accumulates outer products row by row.
pub fn gemm_at_b_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A (m x k) * B^T (b is n x k).
pub fn gemm_a_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// y += alpha * x.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += alpha * x[i];
    }
}

pub fn scale(x: &mut [f64], alpha: f64) {
    for v in x.iter_mut() {
        *v *= alpha;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut m = 0.0f64;
    for i in 0..a.len() {
        m = m.max((a[i] - b[i]).abs());
    }
    m
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = gemm(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0]; // 3x2 (k x m with k=3, m=2)
        let b = [2.0, 1.0, -1.0, 0.5, 4.0, -2.0]; // 3x2 (k x n)
        let mut c1 = vec![0.0; 4];
        gemm_at_b_acc(&mut c1, &a, &b, 3, 2, 2);
        // reference: transpose a manually then gemm
        let at = [1.0, 0.5, 0.0, -2.0, 3.0, 1.0]; // 2x3
        let c2 = gemm(&at, &b, 2, 3, 2);
        assert_eq!(c1, c2);

        let mut c3 = vec![0.0; 4];
        // a (2x3) * b^T where b is 2x3
        let a2 = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b2 = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        gemm_a_bt_acc(&mut c3, &a2, &b2, 2, 3, 2);
        let b2t = [1.0, 2.0, 0.0, 1.0, -1.0, 0.5]; // 3x2
        let c4 = gemm(&a2, &b2t, 2, 3, 2);
        assert_eq!(c3, c4);
    }
}
