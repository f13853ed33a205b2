//! Dense inner loops. Row-major throughout; all `c` outputs accumulate.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = R::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Full `MR×NR` tiles keep their accumulators in registers across the whole
/// `k` loop; ragged edges fall back to row-wise `axpy`. With the `std`
/// feature on x86-64, an AVX2 build of the same loop is picked at runtime.
pub(crate) fn gemm_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports every feature the function is compiled for.
        unsafe { gemm_nn_avx2(a, b, c, m, k, n) };
        return;
    }
    gemm_nn_tiled(a, b, c, m, k, n);
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    gemm_nn_tiled(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_nn_tiled<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[R::zero(); NR]; MR];
            for p in 0..k {
                let bs = &b[p * n + j..p * n + j + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for l in 0..NR {
                        row[l] += av * bs[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cs = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for l in 0..NR {
                    cs[l] += row[l];
                }
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                row_axpy(a, b, c, r, k, n, j);
            }
        }
        i += MR;
    }
    for r in i..m {
        row_axpy(a, b, c, r, k, n, 0);
    }
}

/// Columns `j0..n` of row `i` of `c += a·b`.
#[inline(always)]
fn row_axpy<R: Real>(a: &[R], b: &[R], c: &mut [R], i: usize, k: usize, n: usize, j0: usize) {
    let crow = &mut c[i * n + j0..(i + 1) * n];
    for p in 0..k {
        let aip = a[i * k + p];
        if aip != R::zero() {
            axpy(aip, &b[p * n + j0..(p + 1) * n], crow);
        }
    }
}

fn transpose<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut t = vec![R::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    if m < MR {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<R: Real>(a: &[R], b: &[R], c: &mut [R], k: usize, m: usize, n: usize) {
    let at = transpose(a, k, m);
    gemm_nn(&at, b, c, m, k, n);
}
