//! Row-major dense kernels. Inner loops are written as `axpy` over contiguous
//! rows so they vectorize without reordering floating-point sums.

use crate::scalar::Scalar;

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `a[n,k] · b[k,m]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * m..(p + 1) * m], row);
            }
        }
    }
    c
}

/// `a[n,k] · b[m,k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `out[k,m] += a[n,k]ᵀ · b[n,m]`.
pub fn acc_at_b<T: Scalar>(out: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, br, &mut out[p * m..(p + 1) * m]);
            }
        }
    }
}

/// `out[m] += Σ_rows x[n,m]`.
pub fn acc_rows<T: Scalar>(out: &mut [T], x: &[T], m: usize) {
    for row in x.chunks_exact(m) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    let m = bias.len();
    for row in x.chunks_exact_mut(m) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// In-place softmax over each row of width `m`.
pub fn softmax_rows<T: Scalar>(x: &mut [T], m: usize) {
    for row in x.chunks_exact_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // [3,4]
        let c = matmul(&a, &b, 2, 3, 4);
        // bᵀ laid out as [4,3]
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| (p * 4 + j) as f64 * 0.5)).collect();
        assert_eq!(c, matmul_bt(&a, &bt, 2, 3, 4));
        // aᵀ·c with at_b equals explicit transpose
        let mut g = vec![0.0; 12];
        let x: Vec<f64> = vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5, 0.0, 3.0];
        acc_at_b(&mut g, &a, &x, 2, 3, 4);
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64 - 2.0)).collect();
        assert_eq!(g, matmul(&at, &x, 3, 2, 4));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1e9, 0.0, 0.0];
        softmax_rows(&mut x, 3);
        assert!((x[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(x[3], 0.0);
        assert!((x[4] - 0.5).abs() < 1e-12);
    }
}
