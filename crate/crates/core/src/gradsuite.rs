//! Named finite-difference checks for every layer type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{finite_diff_check, Var};
use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm2d, BlockConfig, Cgsmm, ChannelMixingBlock, Conv, Ctx, Grn, Linear, Lsmm, PatchEmbed, PatchMerge,
    Reweight, StripLayer, StripLayerConfig, StripMixingBlock, Topology,
};
use crate::ops::norm::NormMode;
use crate::ops::StripAxis;
use crate::params::{ParamBuilder, ParamRole, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

type Forward = Box<dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>>;
type Builder = fn(&mut ParamBuilder) -> Result<Forward>;

pub struct GradCase {
    pub name: &'static str,
    pub input_shape: &'static [usize],
    build: Builder,
}

fn boxed<F: Fn(&mut Ctx<'_>, Var) -> Result<Var> + 'static>(f: F) -> Result<Forward> {
    Ok(Box::new(f))
}

fn strip(b: &mut ParamBuilder, axis: StripAxis, len: usize) -> Result<Forward> {
    let l = StripLayer::new(b, "strip", 4, StripLayerConfig { axis, width: 3, patches: 2, len }, true)?;
    boxed(move |cx, x| l.forward(cx, x))
}

fn cgsmm(b: &mut ParamBuilder, topology: Topology) -> Result<Forward> {
    let m = Cgsmm::new(b, "cgsmm", 4, (4, 5), 2, 3, topology, true)?;
    boxed(move |cx, x| m.forward(cx, x))
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "linear",
            input_shape: &[3, 5],
            build: |b| {
                let l = Linear::new(b, "fc", 5, 4)?;
                boxed(move |cx, x| l.forward(cx, x))
            },
        },
        GradCase {
            name: "conv",
            input_shape: &[2, 4, 5, 5],
            build: |b| {
                let spec = ConvSpec::new(4, 6, (3, 3)).with_padding((1, 1)).with_groups(2);
                let c = Conv::new(b, "conv", spec)?;
                boxed(move |cx, x| c.forward(cx, x))
            },
        },
        GradCase {
            name: "depthwise-conv",
            input_shape: &[2, 3, 6, 8],
            build: |b| {
                let c = Conv::new(b, "dw", ConvSpec::depthwise(3, (3, 7)))?;
                boxed(move |cx, x| c.forward(cx, x))
            },
        },
        GradCase {
            name: "batchnorm",
            input_shape: &[3, 4, 3, 3],
            build: |b| {
                let bn = BatchNorm2d::new(b, "bn", 4)?;
                boxed(move |cx, x| bn.forward(cx, x))
            },
        },
        GradCase {
            name: "grn",
            input_shape: &[2, 4, 3, 3],
            build: |b| {
                let g = Grn::new(b, "grn", 4)?;
                boxed(move |cx, x| g.forward(cx, x))
            },
        },
        GradCase { name: "gelu", input_shape: &[2, 3, 2, 2], build: |_| boxed(|cx, x| cx.graph.gelu(x)) },
        GradCase {
            name: "cross-entropy",
            input_shape: &[4, 5],
            build: |_| boxed(|cx, x| cx.graph.cross_entropy(x, &[0, 3, 4, 3], 0.1)),
        },
        GradCase { name: "strip-row", input_shape: &[2, 4, 3, 5], build: |b| strip(b, StripAxis::Row, 5) },
        GradCase { name: "strip-column", input_shape: &[2, 4, 3, 5], build: |b| strip(b, StripAxis::Column, 3) },
        GradCase { name: "cgsmm", input_shape: &[2, 4, 4, 5], build: |b| cgsmm(b, Topology::Cascade) },
        GradCase { name: "cgsmm-parallel", input_shape: &[2, 4, 4, 5], build: |b| cgsmm(b, Topology::Parallel) },
        GradCase {
            name: "reweight",
            input_shape: &[2, 4, 3, 3],
            build: |b| {
                let r = Reweight::new(b, "rw", 4, 2)?;
                boxed(move |cx, x| {
                    let y = cx.graph.gelu(x)?;
                    r.forward(cx, &[x, y])
                })
            },
        },
        GradCase {
            name: "lsmm",
            input_shape: &[2, 4, 5, 9],
            build: |b| {
                let l = Lsmm::new(b, "lsmm", 4)?;
                boxed(move |cx, x| l.forward(cx, x))
            },
        },
        GradCase {
            name: "patch-embed",
            input_shape: &[2, 3, 8, 8],
            build: |b| {
                let e = PatchEmbed::new(b, "embed", 3, 4, 4)?;
                boxed(move |cx, x| e.forward(cx, x))
            },
        },
        GradCase {
            name: "patch-merge",
            input_shape: &[2, 4, 4, 4],
            build: |b| {
                let m = PatchMerge::new(b, "merge", 4)?;
                boxed(move |cx, x| m.forward(cx, x))
            },
        },
        GradCase {
            name: "strip-mixing-block",
            input_shape: &[2, 8, 4, 4],
            build: |b| {
                let m = StripMixingBlock::new(b, "mix", BlockConfig::new(8), (4, 4))?;
                boxed(move |cx, x| m.forward(cx, x))
            },
        },
        GradCase {
            name: "channel-mixing-block",
            input_shape: &[2, 4, 3, 3],
            build: |b| {
                let c = ChannelMixingBlock::new(b, "chan", 4, 3)?;
                boxed(move |cx, x| c.forward(cx, x))
            },
        },
        GradCase {
            name: "block-stack",
            input_shape: &[2, 8, 8, 8],
            build: |b| {
                let m = StripMixingBlock::new(b, "mix", BlockConfig::new(8), (8, 8))?;
                let c = ChannelMixingBlock::new(b, "chan", 8, BlockConfig::DEFAULT_CHANNEL_RATIO)?;
                boxed(move |cx, x| {
                    let y = m.forward(cx, x)?;
                    c.forward(cx, y)
                })
            },
        },
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Worst error for one differentiated tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub case: String,
    pub tensor: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Parameters drawn away from their initial values so every path carries signal.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let role = store.role(id);
        if !role.trainable() {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            let u: f64 = rng.gen_range(-0.5..0.5);
            *v = if role == ParamRole::NormScale { 1.0 + u } else { u };
        }
    }
}

fn probe_loss(fwd: &Forward, store: &ParamStore, input: &Tensor, r: &Tensor) -> Result<f64> {
    let mut cx = Ctx::new(store, NormMode::Train, false);
    let x = cx.input(input.clone());
    let y = fwd(&mut cx, x)?;
    let l = cx.graph.dot(y, r.clone())?;
    Ok(cx.value(l).data()[0])
}

/// Checks the input gradient and every trainable parameter gradient.
pub fn run_case(case: &GradCase, seed: u64, eps: f64, tol: f64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::materialized(seed);
    let fwd = (case.build)(&mut b)?;
    let mut store = b.into_store()?;
    perturb(&mut store, &mut rng);
    let numel: usize = case.input_shape.iter().product();
    let input = Tensor::from_vec(case.input_shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let (r, x_grad, param_grads) = {
        let mut cx = Ctx::training(&store);
        let x = cx.graph.param(input.clone());
        let y = fwd(&mut cx, x)?;
        let shape = cx.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let r = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let l = cx.graph.dot(y, r.clone())?;
        let mut g = cx.graph.backward(l)?;
        let xg = g.take(x).ok_or_else(|| Error::Usage("input gradient missing".into()))?;
        (r, xg, cx.param_grads(&mut g))
    };

    let check = |tensor: String, report: crate::autograd::GradCheckReport| TensorCheck {
        case: case.name.into(),
        tensor,
        coordinates: report.coordinates,
        max_rel_error: report.max_rel_error,
        worst_index: report.worst_index,
        passed: report.passes(tol),
    };
    let mut out = Vec::new();
    let report = finite_diff_check(|t| probe_loss(&fwd, &store, t, &r), &input, &x_grad, eps)?;
    out.push(check("input".into(), report));
    let bound: std::collections::HashSet<_> = param_grads.iter().map(|(id, _)| *id).collect();
    for id in store.ids().filter(|&id| store.role(id).trainable()) {
        if !bound.contains(&id) {
            return Err(Error::Usage(format!("{}: parameter `{}` received no gradient", case.name, store.name(id))));
        }
    }
    for (id, g) in &param_grads {
        let mut scratch = store.clone();
        let base = store.get(*id).clone();
        let report = finite_diff_check(
            |t| {
                *scratch.get_mut(*id) = t.clone();
                probe_loss(&fwd, &scratch, &input, &r)
            },
            &base,
            g,
            eps,
        )?;
        out.push(check(store.name(*id).to_string(), report));
    }
    Ok(out)
}

/// Runs every case, or only `only` when given.
pub fn run_suite(only: Option<&str>, seed: u64, eps: f64, tol: f64) -> Result<Vec<TensorCheck>> {
    let all = cases();
    let selected: Vec<&GradCase> = match only {
        Some(name) => {
            let c = all
                .iter()
                .find(|c| c.name == name)
                .ok_or_else(|| Error::Usage(format!("unknown layer `{name}`; known: {}", case_names().join(", "))))?;
            vec![c]
        }
        None => all.iter().collect(),
    };
    let mut out = Vec::new();
    for c in selected {
        out.extend(run_case(c, seed, eps, tol)?);
    }
    Ok(out)
}
