//! Reference implementations used only by tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strip_mlp::autograd::Var;
use strip_mlp::layers::{Cgsmm, Ctx};
use strip_mlp::ops::{self, StripAxis};
use strip_mlp::params::{ParamBuilder, ParamId, ParamStore};
use strip_mlp::{ConvSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a layer with materialized parameters, then randomizes every trainable tensor.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> strip_mlp::Result<T>) -> (T, ParamStore) {
    let mut b = ParamBuilder::materialized(seed);
    let layer = f(&mut b).unwrap();
    let mut store = b.into_store().unwrap();
    randomize(&mut store, seed ^ 0x5eed);
    (layer, store)
}

/// Inference-mode forward of a single-input layer.
pub fn eval(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> strip_mlp::Result<Var>) -> Tensor {
    let mut cx = Ctx::inference(store);
    let v = cx.input(x.clone());
    let y = f(&mut cx, v).unwrap();
    cx.value(y).clone()
}

/// `max |a - b| / max(1, max |b|)`.
pub fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_rel_diff(b)
}

/// Overwrites every trainable tensor with uniform noise so all paths carry signal.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.role(id).trainable() {
            for v in store.get_mut(id).data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }
}

fn at4(t: &Tensor, n: usize, c: usize, h: usize, w: usize) -> f64 {
    let [_, cc, hh, ww] = *t.shape() else { panic!("rank 4") };
    t.data()[((n * cc + c) * hh + h) * ww + w]
}

/// Direct evaluation of a strip projection. `patches == None` means one
/// weight matrix shared by every channel (`weight` is then `[L, k*L]`).
pub fn strip_loops(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    axis: StripAxis,
    k: usize,
    patches: Option<usize>,
) -> Tensor {
    let [n, c, h, w] = *x.shape() else { panic!("rank 4") };
    let len = axis.length(h, w);
    let p = patches.unwrap_or(1);
    let r = (k / 2) as isize;
    let wd = weight.data();
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let pi = ci % p;
            for hi in 0..h {
                for wi in 0..w {
                    let (line, pos) = match axis {
                        StripAxis::Row => (hi, wi),
                        StripAxis::Column => (wi, hi),
                    };
                    let mut acc = bias.map_or(0.0, |b| b.data()[pi * len + pos]);
                    for d in 0..k {
                        let src = line as isize + d as isize - r;
                        let extent = match axis {
                            StripAxis::Row => h,
                            StripAxis::Column => w,
                        };
                        if src < 0 || src >= extent as isize {
                            continue;
                        }
                        for j in 0..len {
                            let v = match axis {
                                StripAxis::Row => at4(x, ni, ci, src as usize, j),
                                StripAxis::Column => at4(x, ni, ci, j, src as usize),
                            };
                            acc += wd[(pi * len + pos) * k * len + d * len + j] * v;
                        }
                    }
                    out[((ni * c + ci) * h + hi) * w + wi] = acc;
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

/// Per-position channel map `[O, I]` plus bias.
pub fn pointwise_loops(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let [n, c, h, w] = *x.shape() else { panic!("rank 4") };
    let o = weight.shape()[0];
    let mut out = vec![0.0; n * o * h * w];
    for ni in 0..n {
        for oi in 0..o {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        acc += weight.data()[oi * c + ci] * at4(x, ni, ci, hi, wi);
                    }
                    out[((ni * o + oi) * h + hi) * w + wi] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, h, w], out).unwrap()
}

pub struct CgsmmWeights {
    pub row_w: Tensor,
    pub row_b: Option<Tensor>,
    pub col_w: Tensor,
    pub col_b: Option<Tensor>,
    /// Cascade: two 2C -> C fuses; parallel: one 3C -> C fuse. `(weight [O, I], bias)`.
    pub fuses: Vec<(Tensor, Option<Tensor>)>,
}

impl CgsmmWeights {
    pub fn from_store(store: &ParamStore, m: &Cgsmm) -> Self {
        let get = |id: ParamId| store.get(id).clone();
        let flat = |id: ParamId| {
            let t = store.get(id);
            t.reshape(&[t.dim(0), t.numel() / t.dim(0)]).unwrap()
        };
        Self {
            row_w: get(m.row.weight),
            row_b: m.row.bias.map(get),
            col_w: get(m.col.weight),
            col_b: m.col.bias.map(get),
            fuses: m.fuses.iter().map(|f| (flat(f.weight), f.bias.map(get))).collect(),
        }
    }
}

/// Loop oracle for the cascade module: row strip, fuse with the input, column
/// strip, fuse with the input.
pub fn cgsmm_cascade_loops(x: &Tensor, w: &CgsmmWeights, k: usize, patches: Option<usize>) -> Tensor {
    let x_w = strip_loops(x, &w.row_w, w.row_b.as_ref(), StripAxis::Row, k, patches);
    let x_w = pointwise_loops(&ops::concat(&[&x_w, x], 1).unwrap(), &w.fuses[0].0, w.fuses[0].1.as_ref());
    let x_h = strip_loops(&x_w, &w.col_w, w.col_b.as_ref(), StripAxis::Column, k, patches);
    pointwise_loops(&ops::concat(&[&x_h, x], 1).unwrap(), &w.fuses[1].0, w.fuses[1].1.as_ref())
}

pub fn cgsmm_parallel_loops(x: &Tensor, w: &CgsmmWeights, k: usize, patches: Option<usize>) -> Tensor {
    let x_r = strip_loops(x, &w.row_w, w.row_b.as_ref(), StripAxis::Row, k, patches);
    let x_c = strip_loops(x, &w.col_w, w.col_b.as_ref(), StripAxis::Column, k, patches);
    pointwise_loops(&ops::concat(&[&x_r, &x_c, x], 1).unwrap(), &w.fuses[0].0, w.fuses[0].1.as_ref())
}

/// `[P, L, k*L]` strip weight as a grouped `(1, k)` conv weight `[P*L, L, 1, k]`.
fn strip_as_conv_weight(w: &Tensor, k: usize) -> Tensor {
    let [p, l, _] = *w.shape() else { panic!("rank 3") };
    let mut out = vec![0.0; p * l * l * k];
    for pi in 0..p {
        for o in 0..l {
            for i in 0..l {
                for d in 0..k {
                    out[((pi * l + o) * l + i) * k + d] = w.data()[(pi * l + o) * k * l + d * l + i];
                }
            }
        }
    }
    Tensor::from_vec(&[p * l, l, 1, k], out).unwrap()
}

fn bias_flat(b: Option<&Tensor>) -> Option<Tensor> {
    b.map(|b| b.reshape(&[b.numel()]).unwrap())
}

/// The cascade module written as view/permute/grouped-conv steps on the
/// channel-patched layout, following the reference pseudo-code line by line.
pub fn cgsmm_choreography(x: &Tensor, w: &CgsmmWeights, k: usize, p: usize) -> Tensor {
    let [n, c, h, wd] = *x.shape() else { panic!("rank 4") };
    let cp = c / p;
    let pad = k / 2;
    let conv = |t: &Tensor, weight: &Tensor, bias: Option<Tensor>, channels: usize| {
        let spec =
            ConvSpec::new(channels, channels, (1, k)).with_padding((0, pad)).with_groups(p).with_bias(bias.is_some());
        ops::conv2d(t, &spec, weight, bias.as_ref()).unwrap()
    };
    // x.view(N, CP, P, H, W)
    let x5 = x.reshape(&[n, cp, p, h, wd]).unwrap();
    // x_w = x.permute(0,1,3,2,4).view(N, CP, H, P*W)
    let x_w = ops::permute(&x5, &[0, 1, 3, 2, 4]).unwrap().reshape(&[n, cp, h, p * wd]).unwrap();
    // proj_w(x_w.permute(0,3,1,2)).permute(0,2,3,1)
    let t = ops::permute(&x_w, &[0, 3, 1, 2]).unwrap();
    let t = conv(&t, &strip_as_conv_weight(&w.row_w, k), bias_flat(w.row_b.as_ref()), p * wd);
    let t = ops::permute(&t, &[0, 2, 3, 1]).unwrap();
    // view(N, CP, H, P, W).permute(0,1,3,2,4).view(N, C, H, W)
    let t = t.reshape(&[n, cp, h, p, wd]).unwrap();
    let x_w = ops::permute(&t, &[0, 1, 3, 2, 4]).unwrap().reshape(&[n, c, h, wd]).unwrap();
    let fuse = |a: &Tensor, (fw, fb): &(Tensor, Option<Tensor>)| {
        let spec = ConvSpec::pointwise(2 * c, c).with_bias(fb.is_some());
        let w4 = fw.reshape(&[c, 2 * c, 1, 1]).unwrap();
        ops::conv2d(&ops::concat(&[a, x], 1).unwrap(), &spec, &w4, fb.as_ref()).unwrap()
    };
    let x_w = fuse(&x_w, &w.fuses[0]);
    // proj_h(x_w.view(N, CP, H*P, W).permute(0,2,1,3)).permute(0,2,1,3)
    let t = ops::permute(&x_w.reshape(&[n, cp, p * h, wd]).unwrap(), &[0, 2, 1, 3]).unwrap();
    let t = conv(&t, &strip_as_conv_weight(&w.col_w, k), bias_flat(w.col_b.as_ref()), p * h);
    let x_h = ops::permute(&t, &[0, 2, 1, 3]).unwrap().reshape(&[n, c, h, wd]).unwrap();
    fuse(&x_h, &w.fuses[1])
}

/// Naive direct convolution (no im2col, no GEMM).
pub fn conv_loops(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let [n, c, h, wd] = *x.shape() else { panic!("rank 4") };
    let (oh, ow) = spec.output_hw(h, wd).unwrap();
    let (kh, kw) = spec.kernel;
    let cin_g = c / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut out = vec![0.0; n * spec.out_channels * oh * ow];
    for ni in 0..n {
        for o in 0..spec.out_channels {
            let g = o / cout_g;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cin_g {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * spec.stride.0 + dy) as isize - spec.padding.0 as isize;
                                let ix = (xx * spec.stride.1 + dx) as isize - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * cin_g + ci) * kh + dy) * kw + dx]
                                    * at4(x, ni, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((ni * spec.out_channels + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, spec.out_channels, oh, ow], out).unwrap()
}

/// MAC count of a convolution as the product of the im2col GEMM dimensions.
pub fn im2col_macs(spec: &ConvSpec, h: usize, w: usize) -> u64 {
    let (oh, ow) = spec.output_hw(h, w).unwrap();
    let rows = spec.out_channels / spec.groups;
    let inner = spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1;
    let cols = oh * ow;
    (spec.groups * rows * inner * cols) as u64
}

/// Ungrouped strip projection routed through [`conv_loops`]: the mixed axis
/// becomes the channel axis and the band a `(1, k)` kernel. `weight` is `[L, k*L]`.
pub fn strip_via_conv(x: &Tensor, weight: &Tensor, axis: StripAxis, k: usize) -> Tensor {
    // Row: [N,C,H,W] -> [N,W,C,H]; Column: [N,C,H,W] -> [N,H,C,W].
    let (perm, back) = match axis {
        StripAxis::Row => ([0, 3, 1, 2], [0, 2, 3, 1]),
        StripAxis::Column => ([0, 2, 1, 3], [0, 2, 1, 3]),
    };
    let xt = ops::permute(x, &perm).unwrap();
    let l = xt.dim(1);
    let mut cw = vec![0.0; l * l * k];
    for o in 0..l {
        for i in 0..l {
            for d in 0..k {
                cw[(o * l + i) * k + d] = weight.data()[o * k * l + d * l + i];
            }
        }
    }
    let cw = Tensor::from_vec(&[l, l, 1, k], cw).unwrap();
    let spec = ConvSpec::new(l, l, (1, k)).with_padding((0, k / 2)).with_bias(false);
    ops::permute(&conv_loops(&xt, &spec, &cw, None), &back).unwrap()
}

/// Smallest model that still exercises every part: four stages, skips, both branches.
pub fn tiny_model_config() -> strip_mlp::model::ModelConfig {
    strip_mlp::model::ModelConfig {
        channels: 8,
        depths: [1, 1, 1, 1],
        patch_size: 2,
        num_classes: 5,
        image_size: 16,
        ..Default::default()
    }
}

/// Per-row linear map `y = x W^T + b` by loops.
pub fn linear_loops(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, i) = (x.dim(0), x.dim(1));
    let o = w.dim(0);
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for j in 0..o {
            out[r * o + j] = b.data()[j] + (0..i).map(|k| w.data()[j * i + k] * x.data()[r * i + k]).sum::<f64>();
        }
    }
    Tensor::from_vec(&[n, o], out).unwrap()
}

pub fn mean_pool_loops(x: &Tensor) -> Tensor {
    let [n, c, h, w] = *x.shape() else { panic!("rank 4") };
    let plane = h * w;
    let out = (0..n * c).map(|i| x.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
    Tensor::from_vec(&[n, c], out).unwrap()
}

/// Ungrouped convolution as an explicit im2col matrix times the flattened weight.
pub fn conv_im2col(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    assert_eq!(spec.groups, 1);
    let [n, c, h, wd] = *x.shape() else { panic!("rank 4") };
    let (oh, ow) = spec.output_hw(h, wd).unwrap();
    let (kh, kw) = spec.kernel;
    let rows = c * kh * kw;
    let cols = oh * ow;
    let o = spec.out_channels;
    let mut out = vec![0.0; n * o * cols];
    for ni in 0..n {
        let mut col = vec![0.0; rows * cols];
        for ci in 0..c {
            for dy in 0..kh {
                for dx in 0..kw {
                    let r = (ci * kh + dy) * kw + dx;
                    for y in 0..oh {
                        for xx in 0..ow {
                            let iy = (y * spec.stride.0 + dy) as isize - spec.padding.0 as isize;
                            let ix = (xx * spec.stride.1 + dx) as isize - spec.padding.1 as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                col[r * cols + y * ow + xx] = at4(x, ni, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                }
            }
        }
        for oi in 0..o {
            for j in 0..cols {
                let acc: f64 = (0..rows).map(|r| w.data()[oi * rows + r] * col[r * cols + j]).sum();
                out[(ni * o + oi) * cols + j] = acc + b.map_or(0.0, |b| b.data()[oi]);
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out).unwrap()
}
