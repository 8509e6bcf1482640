//! Pure data movement: permute, concatenate, slice.

use crate::error::{Error, Result};
use crate::ops::activation::axis_split;
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `y.shape[i] = x.shape[perm[i]]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!("invalid permutation {perm:?} for rank {rank}")));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut index = vec![0usize; rank];
    for _ in 0..x.numel() {
        let off: usize = index.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(xd[off]);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let rank = first.rank();
    for p in parts {
        let compatible = p.rank() == rank && (0..rank).all(|a| a == axis || p.shape()[a] == first.shape()[a]);
        if !compatible {
            return Err(Error::dim(format!(
                "concat along {axis}: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_vec(&shape, out)
}

/// `len` consecutive entries of `axis` starting at `start`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, axis_len, inner) = axis_split(x.shape(), axis)?;
    if start + len > axis_len {
        return Err(Error::dim(format!("slice {start}..{} exceeds axis length {axis_len}", start + len)));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::from_vec(&shape, out)
}

/// Split `axis` into consecutive pieces of the given sizes.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let axis_len = *x.shape().get(axis).ok_or_else(|| Error::dim(format!("axis {axis} out of range")))?;
    if sizes.iter().sum::<usize>() != axis_len {
        return Err(Error::dim(format!("split sizes {sizes:?} do not sum to axis length {axis_len}")));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = slice(x, axis, start, len);
            start += len;
            part
        })
        .collect()
}

/// Backward of [`slice`]: place `dy` into a zero tensor of `input_shape`.
pub fn slice_backward(input_shape: &[usize], axis: usize, start: usize, dy: &Tensor) -> Result<Tensor> {
    let (outer, axis_len, inner) = axis_split(input_shape, axis)?;
    let len = dy.shape()[axis];
    let mut dx = vec![0.0; input_shape.iter().product()];
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        dx[base..base + len * inner].copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_vec(input_shape, dx)
}
