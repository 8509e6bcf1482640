use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v * std_normal_cdf(v)).ensure_finite("gelu")
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let pdf_scale = 1.0 / (2.0 * PI).sqrt();
    x.zip_map(dy, |v, g| {
        let pdf = pdf_scale * (-0.5 * v * v).exp();
        g * (std_normal_cdf(v) + v * pdf)
    })
}

/// Split a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut y = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (xd[idx(k)] - max).exp();
                y[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                y[idx(k)] /= total;
            }
        }
    }
    Tensor::from_vec(x.shape(), y)?.ensure_finite("softmax")
}

/// Backward of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), dx)
}
