//! Minimal dense kernels backing the convolution and linear layers.
//!
//! Parallelism is over disjoint output row ranges, so results are bitwise
//! identical for any thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work size (in multiply-adds) below which a matmul runs single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// Rows processed together; four independent accumulator chains hide FMA
/// latency without changing any row's summation order.
const ROW_BLOCK: usize = 4;

/// `c[m, k] * b[k, n]`, all row-major.
pub fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::zero(); m * n];
    let block = |(cchunk, achunk): (&mut [E], &[E])| {
        let rows = cchunk.len() / n.max(1);
        if rows == ROW_BLOCK {
            matmul_rows4(cchunk, achunk, b, k, n);
        } else {
            for (crow, arow) in cchunk.chunks_mut(n).zip(achunk.chunks(k)) {
                matmul_row(crow, arow, b, n);
            }
        }
    };
    if m >= 2 && m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(block);
    } else {
        c.chunks_mut(ROW_BLOCK * n)
            .zip(a.chunks(ROW_BLOCK * k))
            .for_each(block);
    }
    c
}

#[inline]
fn matmul_row<E: Scalar>(crow: &mut [E], arow: &[E], b: &[E], n: usize) {
    for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
        if av == E::zero() {
            continue;
        }
        for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
            *cv = *cv + av * bv;
        }
    }
}

/// Four C rows at once: each B row is loaded once and feeds four rows.
fn matmul_rows4<E: Scalar>(c: &mut [E], a: &[E], b: &[E], k: usize, n: usize) {
    let (c0, rest) = c.split_at_mut(n);
    let (c1, rest) = rest.split_at_mut(n);
    let (c2, c3) = rest.split_at_mut(n);
    let a0 = &a[0..k];
    let a1 = &a[k..2 * k];
    let a2 = &a[2 * k..3 * k];
    let a3 = &a[3 * k..4 * k];
    for (kk, brow) in b.chunks_exact(n).enumerate() {
        let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
        for j in 0..n {
            let bv = brow[j];
            c0[j] = c0[j] + v0 * bv;
            c1[j] = c1[j] + v1 * bv;
            c2[j] = c2[j] + v2 * bv;
            c3[j] = c3[j] + v3 * bv;
        }
    }
}

/// Row-major transpose of an `r x c` matrix.
pub fn transpose<E: Scalar>(a: &[E], r: usize, c: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0f64, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_against_naive_large() {
        let m = 70;
        let k = 13;
        let n = 9;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 + 1) % 7) as f64 - 3.0).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert_eq!(c[i * n + j], acc);
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(transpose(&t, 4, 3), a);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0);
    }
}
