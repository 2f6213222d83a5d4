//! Forward kernels shared by the tape and the tape-free inference path, so
//! both produce bit-identical values.

use super::tensor::{Real, Tensor};

/// `y = x Wᵀ + b` for `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    T::gemm_raw(rows, inp, out, T::one(), x, inp, 1, w, 1, inp, T::one(), &mut y, out, 1);
    y
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn sigmoid<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
        .collect()
}

pub fn tanh<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Softmax of a `[rows, cols]` matrix along `axis` (0 = down columns, 1 = along rows).
pub fn softmax<T: Real>(x: &[T], rows: usize, cols: usize, axis: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    let (outer, inner, stride_outer, stride_inner) =
        if axis == 1 { (rows, cols, cols, 1) } else { (cols, rows, 1, cols) };
    for o in 0..outer {
        let at = |i: usize| o * stride_outer + i * stride_inner;
        let mut max = T::neg_infinity();
        for i in 0..inner {
            max = max.max(x[at(i)]);
        }
        let mut total = T::zero();
        for i in 0..inner {
            let e = (x[at(i)] - max).exp();
            y[at(i)] = e;
            total += e;
        }
        for i in 0..inner {
            y[at(i)] /= total;
        }
    }
    y
}

/// `y[r] = M[r] z[r]` for `M: [rows, d*d]` (row-major `d x d` blocks), `z: [rows, d]`.
pub fn batch_matvec<T: Real>(m: &[T], z: &[T], rows: usize, d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * d];
    for r in 0..rows {
        let mr = &m[r * d * d..(r + 1) * d * d];
        let zr = &z[r * d..(r + 1) * d];
        for i in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc += mr[i * d + j] * zr[j];
            }
            y[r * d + i] = acc;
        }
    }
    y
}

/// Plain `d x d` matrix product `a b`.
pub fn matmul_square<T: Real>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut c = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = T::zero();
            for k in 0..d {
                acc += a[i * d + k] * b[k * d + j];
            }
            c[i * d + j] = acc;
        }
    }
    c
}

/// Row-wise squared Euclidean norm.
pub fn row_sq_norm<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| x[r * cols..(r + 1) * cols].iter().fold(T::zero(), |acc, &v| acc + v * v))
        .collect()
}

/// Runs a dense MLP with ReLU hidden activations on `x: [rows, in]`.
pub fn mlp_forward<T: Real>(layers: &[(&Tensor<T>, &Tensor<T>)], sigmoid_out: bool, x: &[T], rows: usize) -> Vec<T> {
    let mut h = x.to_vec();
    let last = layers.len() - 1;
    for (l, (w, b)) in layers.iter().enumerate() {
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        h = linear(&h, rows, w.data(), b.data(), inp, out);
        if l < last {
            h = relu(&h);
        } else if sigmoid_out {
            h = sigmoid(&h);
        }
    }
    h
}
