//! Layers and blocks of the network, each owning the ids of its parameters.
//!
//! Every layer can run forward on a [`Ctx`] and report its analytic cost
//! through [`Layer::cost`].

mod basic;
mod blocks;
mod lsmm;
mod strip;

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use serde::Serialize;

pub use basic::{BatchNorm2d, Conv, Grn, Linear};
pub use blocks::{BlockConfig, Branches, ChannelMixingBlock, PatchEmbed, PatchMerge, PatchPolicy, StripMixingBlock};
pub use lsmm::{Lsmm, Reweight};
pub use strip::{strip_mlp_1d, Cgsmm, StripLayer, StripLayerConfig, Topology};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::Result;
use crate::ops::norm::{update_running, NormMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Parameter and multiply-accumulate counts for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub weights: u64,
    pub biases: u64,
    /// Affine parameters of BN and GRN.
    pub norm: u64,
    pub macs: u64,
}

impl Cost {
    pub fn params(&self) -> u64 {
        self.weights + self.biases + self.norm
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            weights: self.weights + o.weights,
            biases: self.biases + o.biases,
            norm: self.norm + o.norm,
            macs: self.macs + o.macs,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

/// Parameter and MAC accounting. Composite layers list their children;
/// leaves override `param_ids`, `params` and `macs`.
pub trait Layer {
    fn children(&self) -> Vec<&dyn Layer> {
        Vec::new()
    }

    /// Every tensor in the store this layer reads, running stats included.
    fn param_ids(&self) -> Vec<ParamId> {
        self.children().iter().flat_map(|c| c.param_ids()).collect()
    }

    /// Learnable parameter counts; `macs` is zero.
    fn params(&self) -> Cost {
        self.children().iter().map(|c| c.params()).sum()
    }

    /// Multiply-accumulates for one sample whose input map is `h x w`.
    fn macs(&self, h: usize, w: usize) -> Result<u64> {
        self.children().iter().map(|c| c.macs(h, w)).sum()
    }

    fn cost(&self, h: usize, w: usize) -> Result<Cost> {
        Ok(Cost { macs: self.macs(h, w)?, ..self.params() })
    }
}

/// A pending running-statistics update from a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let mean = update_running(store.get(u.mean), &u.batch_mean, u.momentum);
        let var = update_running(store.get(u.var), &u.batch_var, u.momentum);
        *store.get_mut(u.mean) = mean;
        *store.get_mut(u.var) = var;
    }
}

/// One forward pass: the graph plus the parameter bindings it uses.
pub struct Ctx<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    mode: NormMode,
    track_grads: bool,
    vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: NormMode, track_grads: bool) -> Self {
        Self { graph: Graph::new(), store, mode, track_grads, vars: HashMap::new(), bn_updates: Vec::new() }
    }

    /// Train-mode normalization with parameter gradients.
    pub fn training(store: &'s ParamStore) -> Self {
        Self::new(store, NormMode::Train, true)
    }

    /// Eval-mode normalization, no parameter gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, NormMode::Eval, false)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    /// Graph node for a stored tensor; bound once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track_grads && self.store.role(id).trainable() {
            self.graph.param(value)
        } else {
            self.graph.input(value)
        };
        self.vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub(crate) fn push_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every bound trainable parameter, ordered by id.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> =
            self.vars.iter().filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
