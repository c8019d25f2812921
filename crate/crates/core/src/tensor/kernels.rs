use super::Real;

const MR: usize = 12;
const NR: usize = 4;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Full `MR×NR` tiles of `c` are accumulated in registers over the whole of
/// `k` and added to `c` once; ragged edges fall back to row updates. The
/// summation order depends only on the shapes, so results are reproducible.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (mb, nb) = (m - m % MR, n - n % NR);
    let mut panel = vec![T::zero(); k * MR];
    for i0 in (0..mb).step_by(MR) {
        // pack the MR rows of `a` column by column
        for (p, col) in panel.chunks_exact_mut(MR).enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = a[(i0 + r) * k + p];
            }
        }
        for j0 in (0..nb).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (col, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(n)) {
                let bv: &[T; NR] = brow[j0..j0 + NR].try_into().expect("NR-wide slice");
                for (row, &av) in acc.iter_mut().zip(col) {
                    for (x, &y) in row.iter_mut().zip(bv) {
                        *x = *x + av * y;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let dst = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for (x, &y) in dst.iter_mut().zip(row) {
                    *x = *x + y;
                }
            }
        }
        if nb < n {
            for i in i0..i0 + MR {
                row_update(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n, nb);
            }
        }
    }
    for i in mb..m {
        row_update(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n, 0);
    }
}

/// `crow[from..] += arow · b[:, from..]`.
fn row_update<T: Real>(arow: &[T], b: &[T], crow: &mut [T], n: usize, from: usize) {
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + from..(p + 1) * n];
        for (cv, &bv) in crow[from..].iter_mut().zip(brow) {
            *cv = *cv + av * bv;
        }
    }
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    gemm_acc(a, &transposed(b, k, n), c, m, n, k);
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(&transposed(a, m, k), b, c, k, m, n);
}

/// Row-major `rows×cols` → `cols×rows`.
fn transposed<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Dot product with four independent accumulators (fixed order, so
/// results are reproducible).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s = s + a[i] * b[i];
    }
    s
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; last];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // odometer over the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // a·b == a·(bᵀ)ᵀ
        let (_, bt) = permute(&b, &[k, n], &[1, 0]);
        let mut c2 = vec![0.0; m * n];
        gemm_nt_acc(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // (aᵀ)ᵀ·b
        let (_, at) = permute(&a, &[m, k], &[1, 0]);
        let mut c3 = vec![0.0; m * n];
        gemm_tn_acc(&at, &b, &mut c3, k, m, n);
        for (x, y) in c3.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_3d() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (shape, out) = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(shape, vec![4, 2, 3]);
        // out[c][a][b] == in[a][b][c]
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out[c * 6 + a * 3 + b], data[a * 12 + b * 4 + c]);
                }
            }
        }
        let (back_shape, back) = permute(&out, &shape, &inverse_perm(&[2, 0, 1]));
        assert_eq!(back_shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }
}
