//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted and [`Graph::backward`] walks it in reverse.
//! The graph is rebuilt on every forward pass.

mod gradcheck;

pub use gradcheck::{finite_diff_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::ops::{self, layout, norm, pool, strip, NormMode, StripAxis};
use crate::tensor::{ConvSpec, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: Box<norm::BatchNormOutput>, mode: NormMode },
    Grn { x: Var, gamma: Var, beta: Var, saved: Box<norm::GrnOutput> },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ChannelScale { x: Var, s: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Strip { x: Var, w: Var, b: Option<Var>, axis: StripAxis, k: usize },
    Sum { x: Var },
    Dot { x: Var, r: Tensor },
    CrossEntropy { logits: Var, labels: Vec<usize>, smoothing: f64, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), &spec, self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }, &parents))
    }

    /// Batch norm; in train mode also returns the batch mean and unbiased
    /// variance for the caller's running-stat update.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let mut saved = norm::batch_norm2d(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode,
            eps,
        )?;
        let stats = saved.batch_mean.take().zip(saved.batch_var.take());
        let y = saved.y.clone();
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, saved: Box::new(saved), mode }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let saved = norm::grn(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let y = saved.y.clone();
        Ok(self.push(y, Op::Grn { x, gamma, beta, saved: Box::new(saved) }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = ops::gelu(self.value(x))?;
        Ok(self.push(y, Op::Gelu { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax_axis(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?.ensure_finite("add")?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let y = self.value(x).scale(c).ensure_finite("scale")?;
        Ok(self.push(y, Op::Scale { x, c }, &[x]))
    }

    /// `x[n,c,:,:] * s[n,c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = pool::channel_scale(self.value(x), self.value(s))?;
        Ok(self.push(y, Op::ChannelScale { x, s }, &[x, s]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), perm)?;
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat(&values, axis)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self
            .value(x)
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::dim(format!("split axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != total {
            return Err(Error::dim(format!("split sizes {sizes:?} do not sum to {total}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn strip(&mut self, x: Var, w: Var, b: Option<Var>, axis: StripAxis, k: usize) -> Result<Var> {
        let y = strip::strip_mix(self.value(x), self.value(w), b.map(|b| self.value(b)), axis, k)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Strip { x, w, b, axis, k }, &parents))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum()).ensure_finite("sum")?;
        Ok(self.push(y, Op::Sum { x }, &[x]))
    }

    /// `sum(x * r)` for a constant `r`; a generic scalar probe of `x`.
    pub fn dot(&mut self, x: Var, r: Tensor) -> Result<Var> {
        let v: f64 = self.value(x).zip_map(&r, |a, b| a * b)?.sum();
        let y = Tensor::scalar(v).ensure_finite("dot")?;
        Ok(self.push(y, Op::Dot { x, r }, &[x]))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, probs) = ops::loss::cross_entropy(self.value(logits), labels, smoothing)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), smoothing, probs },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Differentiable leaves that the loss
    /// does not depend on get a zero gradient; constant inputs get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) && id != loss.0 {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear::linear_backward(val(*x), val(*w), g)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                out.extend(b.map(|b| (b, db)));
                out
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = ops::conv::conv2d_backward(val(*x), spec, val(*w), g)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, saved, mode } => {
                let (dx, dg, db) = norm::batch_norm2d_backward(saved, val(*gamma), g, *mode)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Grn { x, gamma, beta, saved } => {
                let (dx, dg, db) = norm::grn_backward(val(*x), val(*gamma), saved, g)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Gelu { x } => vec![(*x, ops::activation::gelu_backward(val(*x), g)?)],
            Op::Softmax { x, axis } => {
                vec![(*x, ops::activation::softmax_backward(&node.value, g, *axis)?)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { x, c } => vec![(*x, g.scale(*c))],
            Op::ChannelScale { x, s } => {
                let (dx, ds) = pool::channel_scale_backward(val(*x), val(*s), g)?;
                vec![(*x, dx), (*s, ds)]
            }
            Op::GlobalAvgPool { x } => {
                vec![(*x, pool::global_avg_pool_backward(val(*x).shape(), g)?)]
            }
            Op::Reshape { x } => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Permute { x, perm } => {
                vec![(*x, ops::permute(g, &layout::inverse_permutation(perm))?)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        out.push((p, ops::slice(g, *axis, start, len)?));
                    }
                    start += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                vec![(*x, layout::slice_backward(val(*x).shape(), *axis, *start, g)?)]
            }
            Op::Strip { x, w, b, axis, k } => {
                let (dx, dw, db) = strip::strip_mix_backward(val(*x), val(*w), b.is_some(), *axis, *k, g)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::Dot { x, r } => vec![(*x, r.scale(g.data()[0]))],
            Op::CrossEntropy { logits, labels, smoothing, probs } => {
                vec![(*logits, ops::loss::cross_entropy_backward(probs, labels, *smoothing, g.data()[0])?)]
            }
        })
    }
}
