//! Plain-loop numeric kernels shared by the eager functions and the graph.
//!
//! Every reduction runs in a fixed sequential order so results are bitwise
//! reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn check_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Standard matrix product.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_matrix("matmul", a)?;
    let (k2, n) = check_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// (outer, axis extent, inner) decomposition of a shape around `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_into<T: Real>(x: &[T], out: &mut [T], shape: &[usize], axis: usize) {
    let (outer, dim, inner) = axis_layout(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| o * dim * inner + k * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..dim {
                max = max.max(x[idx(k)]);
            }
            let mut total = T::zero();
            for k in 0..dim {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..dim {
                out[idx(k)] /= total;
            }
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::dim("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x.data(), &mut out, x.shape(), axis);
    Tensor::new(x.shape(), out)
}

/// Normalized rows plus per-row inverse standard deviations.
pub(crate) fn layer_norm_stats<T: Real>(x: &[T], rows: usize, cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let c = T::lit(cols as f64);
    let mut xhat = vec![T::zero(); rows * cols];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean /= c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= c;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
    }
    (xhat, inv_std)
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let cols = x.cols();
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::dim(
            "layer_norm",
            format!("x {:?} with gamma {:?} beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    if eps <= T::zero() {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let (mut xhat, _) = layer_norm_stats(x.data(), x.rows(), cols, eps);
    for row in xhat.chunks_mut(cols) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape(), xhat)
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
