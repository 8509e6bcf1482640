use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::norm::{NormMode, BN_EPS, BN_MOMENTUM, GRN_EPS};
use crate::params::{Init, ParamBuilder, ParamId, ParamRole};
use crate::tensor::ConvSpec;

use super::{BnUpdate, Cost, Ctx, Layer};

#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = b.weight(&format!("{name}.weight"), &spec.weight_shape())?;
        let bias = spec.has_bias.then(|| b.bias(&format!("{name}.bias"), &[spec.out_channels])).transpose()?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.spec)
    }
}

impl Layer for Conv {
    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    fn params(&self) -> Cost {
        Cost { weights: self.spec.weight_count() as u64, biases: self.spec.bias_count() as u64, ..Cost::default() }
    }

    fn macs(&self, h: usize, w: usize) -> Result<u64> {
        self.spec.macs(h, w)
    }
}

/// Fully connected layer on `[rows, features]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::config(format!("linear `{name}` with zero features")));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: b.weight(&format!("{name}.weight"), &[out_features, in_features])?,
            bias: b.bias(&format!("{name}.bias"), &[out_features])?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.weight), cx.param(self.bias));
        cx.graph.linear(x, w, Some(b))
    }
}

impl Layer for Linear {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    fn params(&self) -> Cost {
        Cost {
            weights: (self.in_features * self.out_features) as u64,
            biases: self.out_features as u64,
            ..Cost::default()
        }
    }

    /// Per input row; the spatial size is ignored.
    fn macs(&self, _h: usize, _w: usize) -> Result<u64> {
        Ok((self.in_features * self.out_features) as u64)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            gamma: b.alloc(&format!("{name}.gamma"), &[channels], ParamRole::NormScale, Init::Ones)?,
            beta: b.alloc(&format!("{name}.beta"), &[channels], ParamRole::NormShift, Init::Zeros)?,
            running_mean: b.alloc(&format!("{name}.running_mean"), &[channels], ParamRole::RunningMean, Init::Zeros)?,
            running_var: b.alloc(&format!("{name}.running_var"), &[channels], ParamRole::RunningVar, Init::Ones)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        let store = cx.store();
        let mode = cx.mode();
        let (y, stats) = cx.graph.batch_norm2d(
            x,
            g,
            b,
            store.get(self.running_mean),
            store.get(self.running_var),
            mode,
            self.eps,
        )?;
        if let (NormMode::Train, Some((batch_mean, batch_var))) = (mode, stats) {
            cx.push_bn_update(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean,
                batch_var,
                momentum: self.momentum,
            });
        }
        Ok(y)
    }
}

impl Layer for BatchNorm2d {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }

    fn params(&self) -> Cost {
        Cost { norm: 2 * self.channels as u64, ..Cost::default() }
    }
}

/// Global response normalization; starts as the identity (`gamma = beta = 0`).
#[derive(Debug, Clone)]
pub struct Grn {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Grn {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            gamma: b.alloc(&format!("{name}.gamma"), &[channels], ParamRole::NormScale, Init::Zeros)?,
            beta: b.alloc(&format!("{name}.beta"), &[channels], ParamRole::NormShift, Init::Zeros)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        cx.graph.grn(x, g, b, GRN_EPS)
    }
}

impl Layer for Grn {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    fn params(&self) -> Cost {
        Cost { norm: 2 * self.channels as u64, ..Cost::default() }
    }
}
