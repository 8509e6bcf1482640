use crate::error::{Error, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::parallel;
use crate::tensor::Tensor;

/// `y[r, o] = sum_i x[r, i] * w[o, i] + b[o]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, inner) = x.dims2()?;
    let (out, w_inner) = w.dims2()?;
    if inner != w_inner {
        return Err(Error::dim(format!("linear: input has {inner} features but weight expects {w_inner}")));
    }
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(Error::dim(format!("linear: bias shape {:?} does not match {out} outputs", b.shape())));
        }
    }
    let mut y = vec![0.0; rows * out];
    let xd = x.data();
    let wd = w.data();
    parallel::for_each_chunk(&mut y, out.max(1), |r, row| {
        gemm(
            MatRef::row_major(&xd[r * inner..(r + 1) * inner], 1, inner),
            MatRef::row_major(wd, out, inner).t(),
            MatMut::row_major(row, 1, out),
            false,
        );
        if let Some(b) = b {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
    });
    Tensor::from_vec(&[rows, out], y)?.ensure_finite("linear")
}

/// Gradients of [`linear`] with respect to input, weight and bias.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, inner) = x.dims2()?;
    let (out, _) = w.dims2()?;
    if dy.shape() != [rows, out] {
        return Err(Error::dim("linear backward: upstream gradient shape"));
    }
    let mut dx = vec![0.0; rows * inner];
    gemm(
        MatRef::row_major(dy.data(), rows, out),
        MatRef::row_major(w.data(), out, inner),
        MatMut::row_major(&mut dx, rows, inner),
        false,
    );
    let mut dw = vec![0.0; out * inner];
    gemm(
        MatRef::row_major(dy.data(), rows, out).t(),
        MatRef::row_major(x.data(), rows, inner),
        MatMut::row_major(&mut dw, out, inner),
        false,
    );
    let mut db = vec![0.0; out];
    for r in 0..rows {
        for (acc, g) in db.iter_mut().zip(&dy.data()[r * out..(r + 1) * out]) {
            *acc += g;
        }
    }
    Ok((Tensor::from_vec(&[rows, inner], dx)?, Tensor::from_vec(&[out, inner], dw)?, Tensor::from_vec(&[out], db)?))
}
