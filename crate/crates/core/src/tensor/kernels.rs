//! Raw numeric kernels on flat row-major buffers.
//!
//! The matrix product accumulates every output element over the inner index
//! in increasing order, independent of blocking. Adding exact zeros therefore
//! never perturbs a result, which is what makes block-diagonal weights give
//! bit-identical outputs to the corresponding independent half products.

use super::Element;

const K_BLOCK: usize = 128;
const N_BLOCK: usize = 512;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_body(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_body(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_body<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + N_BLOCK).min(n);
        let mut k0 = 0;
        while k0 < k {
            let k1 = (k0 + K_BLOCK).min(k);
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n + j0..i * n + j1];
                for kk in k0..k1 {
                    let aik = arow[kk];
                    if aik == T::zero() {
                        continue;
                    }
                    let brow = &b[kk * n + j0..kk * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aik * bv;
                    }
                }
            }
            k0 = k1;
        }
        j0 = j1;
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Copy>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

/// Generic axis permutation. `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Copy + Default>(shape: &[usize], perm: &[usize], src: &[T]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::default(); src.len()];
    if src.is_empty() {
        return (out_shape, out);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    let mut pos = 0;
    while pos < out.len() {
        let mut o = offset;
        for slot in &mut out[pos..pos + inner] {
            *slot = src[o];
            o += inner_stride;
        }
        pos += inner;
        // advance the odometer over all but the last axis
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
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
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let src: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (out_shape, out) = permute(&shape, &[2, 0, 1], &src);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(out[(a * 2 + b) * 3 + c], src[(b * 3 + c) * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn transpose_twice_is_identity() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = transpose(3, 4, &src);
        assert_eq!(transpose(4, 3, &t), src);
    }

    #[test]
    fn gemm_large_blocks_match_naive() {
        let (m, k, n) = (3, 300, 700);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in (0..n).step_by(37) {
                let want: f64 = (0..k).map(|kk| a[i * k + kk] * b[kk * n + j]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
    }
}
