//! Row-major matmul kernels. All variants accumulate into `out` so the
//! backward pass can add straight into existing adjoint buffers.

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T  (dot products of rows)
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2x3 @ 3x2 worked by hand.
    #[test]
    fn matmul_small_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn nt_and_tn_match_explicit_transposes() {
        let a = [1.0, -2.0, 0.5, 3.0, 0.0, 4.0]; // [2,3]
        let b = [2.0, 1.0, -1.0, 0.5, 1.5, -0.5]; // [2,3]
        // a @ b^T via transposing b by hand into [3,2] column-major walk
        let bt = [2.0, 0.5, 1.0, 1.5, -1.0, -0.5]; // [3,2]
        let mut via_nt = [0.0; 4];
        matmul_nt_acc(&a, &b, 2, 3, 2, &mut via_nt);
        let mut direct = [0.0; 4];
        matmul_acc(&a, &bt, 2, 3, 2, &mut direct);
        assert_eq!(via_nt, direct);

        // a^T @ b ([3,3]) against matmul on the hand-built a^T
        let at = [1.0, 3.0, -2.0, 0.0, 0.5, 4.0]; // [3,2]
        let mut via_tn = [0.0; 9];
        matmul_tn_acc(&a, &b, 2, 3, 3, &mut via_tn);
        let mut direct2 = [0.0; 9];
        matmul_acc(&at, &b, 3, 2, 3, &mut direct2);
        assert_eq!(via_tn, direct2);
    }
}
