//! Raw row-major kernels shared by the tape's forward and backward passes.
//! Every reduction runs in a fixed order so results are bitwise
//! reproducible.

use crate::tensor::Scalar;

/// `a[p×q] · b[q×s]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * s];
    for i in 0..p {
        let row = &mut out[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * s..(k + 1) * s];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// `a[p×q] · b[s×q]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, s: usize) -> Vec<T> {
    let bt = transpose(b, s, q);
    matmul(a, &bt, p, q, s)
}

/// `a[q×p]ᵀ · b[q×s]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], q: usize, p: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * s];
    for k in 0..q {
        let brow = &b[k * s..(k + 1) * s];
        for i in 0..p {
            let aki = a[k * p + i];
            let row = &mut out[i * s..(i + 1) * s];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        // a: 2x3, b: 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), ab);
        let at = transpose(&a, 2, 3);
        let tn = matmul_tn(&at, &b, 3, 2, 4);
        for (x, y) in tn.iter().zip(&ab) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_tanh_form_tracks_exact_form() {
        // exact GELU via erf series is not in std; compare against a
        // tabulated x*Phi(x) at a few points.
        let table: [(f64, f64); 5] = [
            (-2.0, -0.045_500_263_896_358_4),
            (-1.0, -0.158_655_253_931_457_05),
            (0.5, 0.345_731_230_637_006_56),
            (1.0, 0.841_344_746_068_543),
            (3.0, 2.995_950_305_905_11),
        ];
        for (x, exact) in table {
            assert!((gelu(x) - exact).abs() < 1e-3, "x={x}");
        }
    }
}
