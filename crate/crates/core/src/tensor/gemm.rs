//! Deterministic dense matrix multiply.
//!
//! `c += a * b` in the i-k-j loop order: every output element accumulates its
//! k-terms in ascending order, so results are bit-reproducible, and the inner
//! j-loop is over contiguous memory in both `b` and `c`, which lets the
//! compiler vectorize without reassociating floating-point sums.

use crate::scalar::Scalar;

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm a length");
    assert_eq!(b.len(), k * n, "gemm b length");
    assert_eq!(c.len(), m * n, "gemm c length");
    if n == 0 {
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row.iter()) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

/// Row-major transpose: `out[j * rows + i] = a[i * cols + j]`.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    assert_eq!(a.len(), rows * cols, "transpose length");
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.11 + 1.0).collect();
        let mut c = vec![0.5f64; m * n];
        let mut expected = c.clone();
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    expected[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        gemm_acc(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trips() {
        let a: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let t = transpose(3, 4, &a);
        let back = transpose(4, 3, &t);
        assert_eq!(a, back);
    }
}
