//! Value-level tensor operations (no gradient tracking).

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

fn matrix_dims(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{name} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (k2, n) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{k} by {k2}x{n}"
        )));
    }
    finite(
        Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))?,
        "matmul",
    )
}

/// Softmax over the last axis. `-inf` entries become exactly zero; a row that
/// is entirely `-inf` is an error.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = vec![0.0f32; x.numel()];
    for (row, (xr, or)) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
        if xr.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        if !kernels::softmax_row(xr, or) {
            return Err(Error::NoValidTarget { row });
        }
    }
    finite(Tensor::new(x.shape().to_vec(), out)?, "softmax")
}

pub fn rmsnorm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
    if weight.numel() != x.cols() {
        return Err(Error::Dimension(format!(
            "rmsnorm weight has {} entries, last extent is {}",
            weight.numel(),
            x.cols()
        )));
    }
    let (out, _) = kernels::rmsnorm(x.data(), weight.data(), eps);
    finite(Tensor::new(x.shape().to_vec(), out)?, "rmsnorm")
}

pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for (row, r) in out.chunks_exact_mut(c).enumerate() {
        let norm = kernels::dot(r, r).sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateRow { row, norm });
        }
        r.iter_mut().for_each(|v| *v /= norm);
    }
    finite(Tensor::new(x.shape().to_vec(), out)?, "l2_normalize_rows")
}
