//! Value-level tensor operations (no gradient recording).

use crate::error::{Error, Result};

use super::tape::{check_rate, log_sum_exp};
use super::{kernels, Mode, RngState, Scalar, Tensor};

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} · {:?}", a.shape(), b.shape())));
    }
    Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// (outer, extent, inner) strides for iterating slices along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", x.shape())));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data()[(o * n + k) * inner + i];
            }
            kernels::softmax_in_place(&mut buf);
            for (k, &b) in buf.iter().enumerate() {
                out[(o * n + k) * inner + i] = b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalizes over the last axis, then applies `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("feature width {d}, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        kernels::standardize(src, eps, dst);
        for j in 0..d {
            dst[j] = dst[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Inverted dropout. Eval mode returns an exact copy.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::cast(1.0 / (1.0 - rate));
    let data = x
        .data()
        .iter()
        .map(|&v| if rng.uniform() < rate { T::zero() } else { v * keep })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
    }
    for p in parts {
        let ok = p.shape().len() == rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape(), p.shape())));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, data)
}

/// Cross-entropy of `logits` against `label`, with its gradient softmax − onehot.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let n = logits.numel();
    if label >= n {
        return Err(Error::Input(format!("label {label} out of range for {n} candidates")));
    }
    let loss = log_sum_exp(logits.data()) - logits.data()[label];
    let mut grad = logits.data().to_vec();
    kernels::softmax_in_place(&mut grad);
    grad[label] -= T::one();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}
