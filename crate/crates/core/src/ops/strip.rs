//! Strip token mixing.
//!
//! A strip layer maps every line along one spatial axis from a band of `k`
//! adjacent lines: for [`StripAxis::Column`] the output column `j` is
//! `W · [x_{:,j-r}; …; x_{:,j+r}]` with `r = k / 2`, and [`StripAxis::Row`] is
//! the same with rows. Lines outside the map are zero.
//!
//! Channels are split into `P` channel patches; channel `c` belongs to patch
//! `c % P`. Each patch has its own `[L, k·L]` weight matrix (`L` = length of
//! the mixed axis) shared by all channels in the patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripAxis {
    /// Mixes tokens along the width; the strip is a band of adjacent rows.
    Row,
    /// Mixes tokens along the height; the strip is a band of adjacent columns.
    Column,
}

impl StripAxis {
    /// Length of the mixed axis for an `h x w` map.
    pub fn length(self, h: usize, w: usize) -> usize {
        match self {
            StripAxis::Row => w,
            StripAxis::Column => h,
        }
    }
}

struct StripGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    patches: usize,
    len: usize,
    k: usize,
}

impl StripGeometry {
    fn new(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, axis: StripAxis, k: usize) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        if k.is_multiple_of(2) {
            return Err(Error::config(format!("strip width must be odd, got {k}")));
        }
        let [patches, len, kl] = weight.shape() else {
            return Err(Error::dim(format!("strip weight must be [P, L, k*L], got {:?}", weight.shape())));
        };
        let (patches, len, kl) = (*patches, *len, *kl);
        if patches == 0 || c % patches != 0 {
            return Err(Error::config(format!("patch count {patches} does not divide {c} channels")));
        }
        if len != axis.length(h, w) || kl != k * len {
            return Err(Error::dim(format!(
                "strip weight {:?} does not fit a {axis:?} strip of width {k} over {h}x{w}",
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [patches, len] {
                return Err(Error::dim(format!("strip bias {:?}, expected [{patches}, {len}]", b.shape())));
            }
        }
        Ok(Self { n, c, h, w, patches, len, k })
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output lines `[lo, hi)` that read input line `out + shift`.
    fn valid(&self, shift: isize, extent: usize) -> (usize, usize) {
        let lo = (-shift).max(0) as usize;
        let hi = (extent as isize - shift).clamp(0, extent as isize) as usize;
        (lo.min(hi), hi)
    }

    fn shift(&self, d: usize) -> isize {
        d as isize - (self.k / 2) as isize
    }
}

/// Weight block `d` of patch `p` viewed as an `[L_out, L_in]` matrix.
fn weight_block<'a>(wd: &'a [f64], g: &StripGeometry, p: usize, d: usize) -> MatRef<'a> {
    let kl = g.k * g.len;
    let base = p * g.len * kl + d * g.len;
    MatRef::strided(&wd[base..], g.len, g.len, kl, 1)
}

pub fn strip_mix(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, axis: StripAxis, k: usize) -> Result<Tensor> {
    let g = StripGeometry::new(x, weight, bias, axis, k)?;
    let plane = g.plane();
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; x.numel()];
    parallel::for_each_chunk(&mut out, plane.max(1), |nc, out_c| {
        let p = (nc % g.c) % g.patches;
        let x_c = &xd[nc * plane..(nc + 1) * plane];
        for d in 0..g.k {
            let s = g.shift(d);
            let wblk = weight_block(wd, &g, p, d);
            match axis {
                StripAxis::Row => {
                    // out[h, :] += x[h + s, :] · W_d^T
                    let (lo, hi) = g.valid(s, g.h);
                    if lo == hi {
                        continue;
                    }
                    let src = ((lo as isize + s) as usize) * g.w;
                    gemm(
                        MatRef::row_major(&x_c[src..], hi - lo, g.w),
                        wblk.t(),
                        MatMut::row_major(&mut out_c[lo * g.w..hi * g.w], hi - lo, g.w),
                        true,
                    );
                }
                StripAxis::Column => {
                    // out[:, j] += W_d · x[:, j + s]
                    let (lo, hi) = g.valid(s, g.w);
                    if lo == hi {
                        continue;
                    }
                    let src = (lo as isize + s) as usize;
                    gemm(
                        wblk,
                        MatRef::strided(&x_c[src..], g.h, hi - lo, g.w, 1),
                        MatMut::strided(&mut out_c[lo..], g.h, hi - lo, g.w, 1),
                        true,
                    );
                }
            }
        }
        if let Some(b) = bias {
            let b_p = &b.data()[p * g.len..(p + 1) * g.len];
            for hh in 0..g.h {
                for ww in 0..g.w {
                    out_c[hh * g.w + ww] += match axis {
                        StripAxis::Row => b_p[ww],
                        StripAxis::Column => b_p[hh],
                    };
                }
            }
        }
    });
    Tensor::from_vec(x.shape(), out)?.ensure_finite("strip_mix")
}

/// Gradients of [`strip_mix`]: `(dx, dweight, dbias)`.
pub fn strip_mix_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    axis: StripAxis,
    k: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let g = StripGeometry::new(x, weight, None, axis, k)?;
    if dy.shape() != x.shape() {
        return Err(Error::dim("strip_mix backward: upstream gradient shape"));
    }
    let plane = g.plane();
    let (xd, wd, gd) = (x.data(), weight.data(), dy.data());

    let mut dx = vec![0.0; x.numel()];
    parallel::for_each_chunk(&mut dx, plane.max(1), |nc, dx_c| {
        let p = (nc % g.c) % g.patches;
        let g_c = &gd[nc * plane..(nc + 1) * plane];
        for d in 0..g.k {
            let s = g.shift(d);
            let wblk = weight_block(wd, &g, p, d);
            match axis {
                StripAxis::Row => {
                    let (lo, hi) = g.valid(s, g.h);
                    if lo == hi {
                        continue;
                    }
                    let dst = ((lo as isize + s) as usize) * g.w;
                    gemm(
                        MatRef::row_major(&g_c[lo * g.w..], hi - lo, g.w),
                        wblk,
                        MatMut::row_major(&mut dx_c[dst..dst + (hi - lo) * g.w], hi - lo, g.w),
                        true,
                    );
                }
                StripAxis::Column => {
                    let (lo, hi) = g.valid(s, g.w);
                    if lo == hi {
                        continue;
                    }
                    let dst = (lo as isize + s) as usize;
                    gemm(
                        wblk.t(),
                        MatRef::strided(&g_c[lo..], g.h, hi - lo, g.w, 1),
                        MatMut::strided(&mut dx_c[dst..], g.h, hi - lo, g.w, 1),
                        true,
                    );
                }
            }
        }
    });

    let per_patch = g.len * g.k * g.len;
    let mut dw = vec![0.0; weight.numel()];
    parallel::for_each_chunk(&mut dw, per_patch, |p, dw_p| {
        let kl = g.k * g.len;
        for ni in 0..g.n {
            for c in (p..g.c).step_by(g.patches) {
                let off = (ni * g.c + c) * plane;
                let (x_c, g_c) = (&xd[off..off + plane], &gd[off..off + plane]);
                for d in 0..g.k {
                    let s = g.shift(d);
                    let dst = MatMut::strided(&mut dw_p[d * g.len..], g.len, g.len, kl, 1);
                    match axis {
                        StripAxis::Row => {
                            let (lo, hi) = g.valid(s, g.h);
                            if lo == hi {
                                continue;
                            }
                            let src = ((lo as isize + s) as usize) * g.w;
                            gemm(
                                MatRef::row_major(&g_c[lo * g.w..], hi - lo, g.w).t(),
                                MatRef::row_major(&x_c[src..], hi - lo, g.w),
                                dst,
                                true,
                            );
                        }
                        StripAxis::Column => {
                            let (lo, hi) = g.valid(s, g.w);
                            if lo == hi {
                                continue;
                            }
                            let src = (lo as isize + s) as usize;
                            gemm(
                                MatRef::strided(&g_c[lo..], g.h, hi - lo, g.w, 1),
                                MatRef::strided(&x_c[src..], g.h, hi - lo, g.w, 1).t(),
                                dst,
                                true,
                            );
                        }
                    }
                }
            }
        }
    });

    let db = has_bias.then(|| {
        let mut db = vec![0.0; g.patches * g.len];
        for ni in 0..g.n {
            for c in 0..g.c {
                let p = c % g.patches;
                let g_c = &gd[(ni * g.c + c) * plane..][..plane];
                for hh in 0..g.h {
                    for ww in 0..g.w {
                        let l = match axis {
                            StripAxis::Row => ww,
                            StripAxis::Column => hh,
                        };
                        db[p * g.len + l] += g_c[hh * g.w + ww];
                    }
                }
            }
        }
        db
    });

    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        db.map(|d| Tensor::from_vec(&[g.patches, g.len], d)).transpose()?,
    ))
}

/// Plain per-axis token MLP: every column (or row) is multiplied by one
/// shared `[L, L]` matrix, with no neighbouring lines involved.
pub fn axial_mlp(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, axis: StripAxis) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let len = axis.length(h, w);
    if weight.shape() != [len, len] {
        return Err(Error::dim(format!("axial MLP weight {:?}, expected [{len}, {len}]", weight.shape())));
    }
    if bias.is_some_and(|b| b.shape() != [len]) {
        return Err(Error::dim("axial MLP bias length"));
    }
    let plane = h * w;
    let xd = x.data();
    let wm = MatRef::row_major(weight.data(), len, len);
    let mut out = vec![0.0; x.numel()];
    for (nc, out_c) in out.chunks_mut(plane.max(1)).enumerate() {
        let x_c = MatRef::row_major(&xd[nc * plane..(nc + 1) * plane], h, w);
        match axis {
            StripAxis::Row => gemm(x_c, wm.t(), MatMut::row_major(out_c, h, w), true),
            StripAxis::Column => gemm(wm, x_c, MatMut::row_major(out_c, h, w), true),
        }
        if let Some(b) = bias {
            for hh in 0..h {
                for ww in 0..w {
                    out_c[hh * w + ww] += b.data()[if axis == StripAxis::Row { ww } else { hh }];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)?.ensure_finite("axial_mlp")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_column_strip_counts_neighbours() {
        let x = Tensor::ones(&[1, 1, 2, 3]);
        let w = Tensor::ones(&[1, 2, 6]);
        let y = strip_mix(&x, &w, None, StripAxis::Column, 3).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn all_ones_row_strip_counts_neighbours() {
        let x = Tensor::ones(&[1, 1, 3, 2]);
        let w = Tensor::ones(&[1, 2, 6]);
        let y = strip_mix(&x, &w, None, StripAxis::Row, 3).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 6.0, 6.0, 4.0, 4.0]);
    }

    #[test]
    fn rejects_even_width_and_indivisible_patches() {
        let x = Tensor::ones(&[1, 4, 3, 3]);
        assert!(matches!(strip_mix(&x, &Tensor::ones(&[1, 3, 6]), None, StripAxis::Row, 2), Err(Error::Config(_))));
        assert!(matches!(strip_mix(&x, &Tensor::ones(&[3, 3, 9]), None, StripAxis::Row, 3), Err(Error::Config(_))));
    }

    #[test]
    fn bias_is_added_per_patch_and_position() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let w = Tensor::zeros(&[2, 2, 6]);
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let y = strip_mix(&x, &w, Some(&b), StripAxis::Column, 3).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 10.0, 10.0, 20.0, 20.0]);
    }
}
