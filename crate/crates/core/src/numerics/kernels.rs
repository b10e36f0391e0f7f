//! Slice-level dense kernels shared by the value-level ops and the tape.
//!
//! All matrices are row-major. Reductions use a fixed lane split so results
//! are identical from run to run, and accumulate in `f64` whatever the
//! storage type, so single-precision runs only round once per output.

use super::Scalar;

const LANES: usize = 8;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    T::cast(dot_wide(a, b))
}

/// [`dot`] without the final rounding to `T`.
#[inline]
pub fn dot_wide<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l].to_f64_lossless() * y[l].to_f64_lossless();
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x.to_f64_lossless() * y.to_f64_lossless();
    }
    let mut s = 0.0;
    for v in acc {
        s += v;
    }
    s + tail
}

/// y += alpha * x
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m×n] = a[m×k] · b[k×n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                let av = av.to_f64_lossless();
                for (r, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *r += av * bv.to_f64_lossless();
                }
            }
        }
        out.extend(row.iter().map(|&v| T::cast(v)));
    }
    out
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max).to_f64_lossless();
    let mut sum = 0.0;
    for v in row.iter_mut() {
        let e = (v.to_f64_lossless() - max).exp();
        *v = T::cast(e);
        sum += e;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = T::cast(v.to_f64_lossless() * inv);
    }
}

/// Normalizes `x` into `xhat` (population variance) and returns 1/sqrt(var + eps).
pub fn standardize<T: Scalar>(x: &[T], eps: T, xhat: &mut [T]) -> T {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64_lossless()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64_lossless() - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps.to_f64_lossless()).sqrt();
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = T::cast((v.to_f64_lossless() - mean) * inv_std);
    }
    T::cast(inv_std)
}
