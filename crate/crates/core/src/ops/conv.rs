//! Grouped 2-D cross-correlation with zero padding.
//!
//! Three code paths share one contract: a direct loop for depth-wise kernels,
//! a plain GEMM for stride-1 pointwise kernels, and im2col + GEMM otherwise.

use crate::error::{Error, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::parallel;
use crate::tensor::{ConvSpec, Tensor};

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn new(x_shape: &[usize], spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Self> {
        spec.validate()?;
        let [n, cin, h, wd] = x_shape else {
            return Err(Error::dim(format!("conv2d expects (N,C,H,W), got {x_shape:?}")));
        };
        if *cin != spec.in_channels {
            return Err(Error::dim(format!("conv2d: input has {cin} channels, spec expects {}", spec.in_channels)));
        }
        if w.shape() != spec.weight_shape() {
            return Err(Error::dim(format!(
                "conv2d: weight shape {:?}, spec expects {:?}",
                w.shape(),
                spec.weight_shape()
            )));
        }
        match (b, spec.has_bias) {
            (Some(b), true) if b.shape() == [spec.out_channels] => {}
            (None, false) => {}
            _ => return Err(Error::dim(format!("conv2d: bias does not match spec (has_bias = {})", spec.has_bias))),
        }
        let (oh, ow) = spec.output_hw(*h, *wd)?;
        Ok(Self {
            n: *n,
            cin: *cin,
            h: *h,
            w: *wd,
            cout: spec.out_channels,
            oh,
            ow,
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
        })
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }
}

fn input_index(spec: &ConvSpec, o: usize, k: usize, axis: usize, len: usize) -> Option<usize> {
    let (s, p) = if axis == 0 { (spec.stride.0, spec.padding.0) } else { (spec.stride.1, spec.padding.1) };
    let pos = (o * s + k) as isize - p as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

/// Unfold the input channels of group `g` into `[cin_g*kh*kw, oh*ow]`.
fn im2col(x: &[f64], spec: &ConvSpec, geo: &Geometry, g: usize, cols: &mut [f64]) {
    let plane = geo.oh * geo.ow;
    for ci in 0..geo.cin_g {
        let src = &x[(g * geo.cin_g + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..geo.oh {
                    let iy = input_index(spec, oy, ky, 0, geo.h);
                    for ox in 0..geo.ow {
                        dst[oy * geo.ow + ox] = match (iy, input_index(spec, ox, kx, 1, geo.w)) {
                            (Some(iy), Some(ix)) => src[iy * geo.w + ix],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], spec: &ConvSpec, geo: &Geometry, g: usize, dx: &mut [f64]) {
    let plane = geo.oh * geo.ow;
    for ci in 0..geo.cin_g {
        let dst = &mut dx[(g * geo.cin_g + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..geo.oh {
                    let Some(iy) = input_index(spec, oy, ky, 0, geo.h) else {
                        continue;
                    };
                    for ox in 0..geo.ow {
                        if let Some(ix) = input_index(spec, ox, kx, 1, geo.w) {
                            dst[iy * geo.w + ix] += src[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_sample(x: &[f64], w: &[f64], spec: &ConvSpec, geo: &Geometry, out: &mut [f64]) {
    let plane = geo.oh * geo.ow;
    for c in 0..geo.cout {
        let src = &x[c * geo.h * geo.w..][..geo.h * geo.w];
        let ker = &w[c * geo.kh * geo.kw..][..geo.kh * geo.kw];
        let dst = &mut out[c * plane..(c + 1) * plane];
        for oy in 0..geo.oh {
            for ky in 0..geo.kh {
                let Some(iy) = input_index(spec, oy, ky, 0, geo.h) else {
                    continue;
                };
                let row = &src[iy * geo.w..(iy + 1) * geo.w];
                for kx in 0..geo.kw {
                    let k = ker[ky * geo.kw + kx];
                    for ox in 0..geo.ow {
                        if let Some(ix) = input_index(spec, ox, kx, 1, geo.w) {
                            dst[oy * geo.ow + ox] += k * row[ix];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let geo = Geometry::new(x.shape(), spec, w, b)?;
    let plane = geo.oh * geo.ow;
    let mut out = vec![0.0; geo.n * geo.out_len()];
    let xd = x.data();
    let wd = w.data();
    let pointwise = geo.is_pointwise(spec);
    parallel::for_each_chunk(&mut out, geo.out_len(), |ni, out_n| {
        let x_n = &xd[ni * geo.in_len()..(ni + 1) * geo.in_len()];
        if spec.is_depthwise() {
            depthwise_sample(x_n, wd, spec, &geo, out_n);
        } else {
            let k = geo.col_rows();
            let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
            for g in 0..spec.groups {
                let rhs = if pointwise {
                    &x_n[g * geo.cin_g * plane..(g + 1) * geo.cin_g * plane]
                } else {
                    im2col(x_n, spec, &geo, g, &mut cols);
                    &cols[..]
                };
                gemm(
                    MatRef::row_major(&wd[g * geo.cout_g * k..(g + 1) * geo.cout_g * k], geo.cout_g, k),
                    MatRef::row_major(rhs, k, plane),
                    MatMut::row_major(
                        &mut out_n[g * geo.cout_g * plane..(g + 1) * geo.cout_g * plane],
                        geo.cout_g,
                        plane,
                    ),
                    false,
                );
            }
        }
        if let Some(b) = b {
            for (c, bias) in b.data().iter().enumerate() {
                out_n[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bias);
            }
        }
    });
    Tensor::from_vec(&[geo.n, geo.cout, geo.oh, geo.ow], out)?.ensure_finite("conv2d")
}

/// Gradients of [`conv2d`]: `(dx, dw, db)`; `db` is `None` without bias.
pub fn conv2d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let bias_stub = spec.has_bias.then(|| Tensor::zeros(&[spec.out_channels]));
    let geo = Geometry::new(x.shape(), spec, w, bias_stub.as_ref())?;
    if dy.shape() != [geo.n, geo.cout, geo.oh, geo.ow] {
        return Err(Error::dim("conv2d backward: upstream gradient shape"));
    }
    let plane = geo.oh * geo.ow;
    let k = geo.col_rows();
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let pointwise = geo.is_pointwise(spec);

    let mut dx = vec![0.0; geo.n * geo.in_len()];
    parallel::for_each_chunk(&mut dx, geo.in_len(), |ni, dx_n| {
        let dy_n = &dyd[ni * geo.out_len()..(ni + 1) * geo.out_len()];
        if spec.is_depthwise() {
            for c in 0..geo.cout {
                let ker = &wd[c * geo.kh * geo.kw..][..geo.kh * geo.kw];
                let g_out = &dy_n[c * plane..(c + 1) * plane];
                let dst = &mut dx_n[c * geo.h * geo.w..][..geo.h * geo.w];
                for oy in 0..geo.oh {
                    for ky in 0..geo.kh {
                        let Some(iy) = input_index(spec, oy, ky, 0, geo.h) else {
                            continue;
                        };
                        for kx in 0..geo.kw {
                            let kv = ker[ky * geo.kw + kx];
                            for ox in 0..geo.ow {
                                if let Some(ix) = input_index(spec, ox, kx, 1, geo.w) {
                                    dst[iy * geo.w + ix] += kv * g_out[oy * geo.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
            return;
        }
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
        for g in 0..spec.groups {
            let w_g = MatRef::row_major(&wd[g * geo.cout_g * k..(g + 1) * geo.cout_g * k], geo.cout_g, k);
            let dy_g =
                MatRef::row_major(&dy_n[g * geo.cout_g * plane..(g + 1) * geo.cout_g * plane], geo.cout_g, plane);
            if pointwise {
                gemm(
                    w_g.t(),
                    dy_g,
                    MatMut::row_major(&mut dx_n[g * geo.cin_g * plane..(g + 1) * geo.cin_g * plane], k, plane),
                    false,
                );
            } else {
                gemm(w_g.t(), dy_g, MatMut::row_major(&mut dcols, k, plane), false);
                col2im(&dcols, spec, &geo, g, dx_n);
            }
        }
    });

    let mut dw = vec![0.0; w.numel()];
    if spec.is_depthwise() {
        let kk = geo.kh * geo.kw;
        parallel::for_each_chunk(&mut dw, kk, |c, dw_c| {
            for ni in 0..geo.n {
                let src = &xd[ni * geo.in_len() + c * geo.h * geo.w..][..geo.h * geo.w];
                let g_out = &dyd[ni * geo.out_len() + c * plane..][..plane];
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let mut acc = 0.0;
                        for oy in 0..geo.oh {
                            let Some(iy) = input_index(spec, oy, ky, 0, geo.h) else {
                                continue;
                            };
                            for ox in 0..geo.ow {
                                if let Some(ix) = input_index(spec, ox, kx, 1, geo.w) {
                                    acc += g_out[oy * geo.ow + ox] * src[iy * geo.w + ix];
                                }
                            }
                        }
                        dw_c[ky * geo.kw + kx] += acc;
                    }
                }
            }
        });
    } else {
        let group_len = geo.cout_g * k;
        parallel::for_each_chunk(&mut dw, group_len, |g, dw_g| {
            let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
            for ni in 0..geo.n {
                let x_n = &xd[ni * geo.in_len()..(ni + 1) * geo.in_len()];
                let dy_n = &dyd[ni * geo.out_len()..(ni + 1) * geo.out_len()];
                let rhs = if pointwise {
                    &x_n[g * geo.cin_g * plane..(g + 1) * geo.cin_g * plane]
                } else {
                    im2col(x_n, spec, &geo, g, &mut cols);
                    &cols[..]
                };
                gemm(
                    MatRef::row_major(&dy_n[g * geo.cout_g * plane..(g + 1) * geo.cout_g * plane], geo.cout_g, plane),
                    MatRef::row_major(rhs, k, plane).t(),
                    MatMut::row_major(dw_g, geo.cout_g, k),
                    ni > 0,
                );
            }
        });
    }

    let db = spec.has_bias.then(|| {
        let mut db = vec![0.0; geo.cout];
        for ni in 0..geo.n {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyd[ni * geo.out_len() + c * plane..][..plane].iter().sum::<f64>();
            }
        }
        db
    });

    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        db.map(|d| Tensor::from_vec(&[geo.cout], d)).transpose()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_depthwise_ones_is_identity() {
        let x = Tensor::from_vec(&[1, 3, 2, 2], (0..12).map(|v| v as f64 - 3.0).collect()).unwrap();
        let spec = ConvSpec::depthwise(3, (1, 1));
        let y = conv2d(&x, &spec, &Tensor::ones(&[3, 1, 1, 1]), Some(&Tensor::zeros(&[3]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_all_ones_counts_overlapping_taps() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let spec = ConvSpec::depthwise(1, (3, 3)).with_bias(false);
        let y = conv2d(&x, &spec, &Tensor::ones(&[1, 1, 3, 3]), None).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn stride_and_padding_shape() {
        let x = Tensor::ones(&[2, 4, 8, 8]);
        let spec = ConvSpec::patchify(4, 6, 4);
        let y = conv2d(&x, &spec, &Tensor::ones(&[6, 4, 4, 4]), Some(&Tensor::zeros(&[6]))).unwrap();
        assert_eq!(y.shape(), &[2, 6, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 64.0));
    }

    #[test]
    fn channel_count_mismatch_is_rejected() {
        let x = Tensor::ones(&[1, 3, 4, 4]);
        let spec = ConvSpec::pointwise(4, 2);
        assert!(conv2d(&x, &spec, &Tensor::ones(&[2, 4, 1, 1]), Some(&Tensor::zeros(&[2]))).is_err());
    }

    #[test]
    fn non_integral_output_is_config_error() {
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let spec = ConvSpec::patchify(1, 1, 2);
        let err = conv2d(&x, &spec, &Tensor::ones(&[1, 1, 2, 2]), Some(&Tensor::zeros(&[1])));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
