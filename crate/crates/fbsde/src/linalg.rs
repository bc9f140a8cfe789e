//! Small dense matrix kernels on flat row-major slices.
//!
//! Path simulation touches millions of tiny (`d1 <= 4`-ish) matrices, so the
//! hot operations work on caller-provided buffers instead of allocating.

/// Writes the n-by-n identity into `out`.
pub fn set_identity(out: &mut [f64], n: usize) {
    debug_assert_eq!(out.len(), n * n);
    out.fill(0.0);
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
}

/// out = a * b for n-by-n row-major matrices. `out` must not alias inputs.
pub fn mat_mul(a: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    debug_assert!(a.len() == n * n && b.len() == n * n && out.len() == n * n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// out = a * b where a is r-by-m and b is m-by-c, all row-major.
pub fn mat_mul_rect(a: &[f64], b: &[f64], out: &mut [f64], r: usize, m: usize, c: usize) {
    debug_assert!(a.len() == r * m && b.len() == m * c && out.len() == r * c);
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for k in 0..m {
                acc += a[i * m + k] * b[k * c + j];
            }
            out[i * c + j] = acc;
        }
    }
}

/// out = a * v for an n-by-n matrix and n-vector.
pub fn mat_vec(a: &[f64], v: &[f64], out: &mut [f64], n: usize) {
    debug_assert!(a.len() == n * n && v.len() == n && out.len() == n);
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] = row.iter().zip(v).map(|(aij, vj)| aij * vj).sum();
    }
}

/// out = a^T * v for an n-by-n matrix and n-vector.
pub fn mat_tvec(a: &[f64], v: &[f64], out: &mut [f64], n: usize) {
    debug_assert!(a.len() == n * n && v.len() == n && out.len() == n);
    out.fill(0.0);
    for j in 0..n {
        let vj = v[j];
        for i in 0..n {
            out[i] += a[j * n + i] * vj;
        }
    }
}

/// out = a^T * b where a is n-by-n and b is n-by-c (left action of the transpose).
pub fn mat_tmul_rect(a: &[f64], b: &[f64], out: &mut [f64], n: usize, c: usize) {
    debug_assert!(a.len() == n * n && b.len() == n * c && out.len() == n * c);
    out.fill(0.0);
    for k in 0..n {
        for i in 0..n {
            let aki = a[k * n + i];
            for j in 0..c {
                out[i * c + j] += aki * b[k * c + j];
            }
        }
    }
}

/// Inverts the n-by-n matrix `a` into `out` by Gauss-Jordan with partial
/// pivoting; returns the determinant. `out` must not alias `a`.
pub fn invert(a: &[f64], out: &mut [f64], n: usize, scratch: &mut [f64]) -> f64 {
    debug_assert!(a.len() == n * n && out.len() == n * n && scratch.len() == n * n);
    scratch.copy_from_slice(a);
    set_identity(out, n);
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        let mut best = scratch[col * n + col].abs();
        for row in col + 1..n {
            let cand = scratch[row * n + col].abs();
            if cand > best {
                best = cand;
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                scratch.swap(col * n + j, pivot * n + j);
                out.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let diag = scratch[col * n + col];
        det *= diag;
        if diag == 0.0 {
            return 0.0;
        }
        let inv_diag = 1.0 / diag;
        for j in 0..n {
            scratch[col * n + j] *= inv_diag;
            out[col * n + j] *= inv_diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = scratch[row * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                scratch[row * n + j] -= factor * scratch[col * n + j];
                out[row * n + j] -= factor * out[col * n + j];
            }
        }
    }
    det
}

/// Max-norm of the entrywise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max-norm distance of an n-by-n matrix from the identity.
pub fn max_diff_from_identity(a: &[f64], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((a[i * n + j] - target).abs());
        }
    }
    worst
}

/// Frobenius norm.
pub fn fro_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_recovers_identity() {
        let a = [2.0, 1.0, 0.5, -1.0, 3.0, 2.0, 0.0, 1.0, 1.5];
        let mut inv = [0.0; 9];
        let mut scratch = [0.0; 9];
        let det = invert(&a, &mut inv, 3, &mut scratch);
        assert!(det.abs() > 1e-12);
        let mut prod = [0.0; 9];
        mat_mul(&a, &inv, &mut prod, 3);
        assert!(max_diff_from_identity(&prod, 3) < 1e-12);
    }

    #[test]
    fn invert_reports_determinant() {
        let a = [3.0, 0.0, 0.0, 2.0];
        let mut inv = [0.0; 4];
        let mut scratch = [0.0; 4];
        let det = invert(&a, &mut inv, 2, &mut scratch);
        assert!((det - 6.0).abs() < 1e-14);
        assert!((inv[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((inv[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transpose_action_matches_manual() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let v = [5.0, 7.0];
        let mut out = [0.0; 2];
        mat_tvec(&a, &v, &mut out, 2);
        // a^T v = [1*5 + 3*7, 2*5 + 4*7]
        assert_eq!(out, [26.0, 38.0]);
    }
}
