use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{self, StripAxis};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{ConvSpec, Tensor};

use super::{Conv, Cost, Ctx, Layer};

/// Geometry of one strip projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripLayerConfig {
    pub axis: StripAxis,
    /// Number of adjacent lines read per output line; odd.
    pub width: usize,
    /// Channel patches; channel `c` uses the weights of patch `c % patches`.
    pub patches: usize,
    /// Length of the mixed axis.
    pub len: usize,
}

impl StripLayerConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.width == 0 || self.width.is_multiple_of(2) {
            return Err(Error::config(format!("strip width must be odd, got {}", self.width)));
        }
        if self.patches == 0 || !channels.is_multiple_of(self.patches) {
            return Err(Error::config(format!("patch count {} does not divide {channels} channels", self.patches)));
        }
        if self.len == 0 {
            return Err(Error::config("strip length must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StripLayer {
    pub cfg: StripLayerConfig,
    pub channels: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl StripLayer {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        channels: usize,
        cfg: StripLayerConfig,
        has_bias: bool,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let (p, l) = (cfg.patches, cfg.len);
        let weight = b.weight(&format!("{name}.weight"), &[p, l, cfg.width * l])?;
        let bias = has_bias.then(|| b.bias(&format!("{name}.bias"), &[p, l])).transpose()?;
        Ok(Self { cfg, channels, weight, bias })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.strip(x, w, b, self.cfg.axis, self.cfg.width)
    }
}

impl Layer for StripLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    fn params(&self) -> Cost {
        let StripLayerConfig { width, patches, len, .. } = self.cfg;
        Cost {
            weights: (patches * len * width * len) as u64,
            biases: if self.bias.is_some() { (patches * len) as u64 } else { 0 },
            ..Cost::default()
        }
    }

    fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let StripLayerConfig { axis, width, len, .. } = self.cfg;
        if axis.length(h, w) != len {
            return Err(Error::config(format!("{axis:?} strip of length {len} applied to a {h}x{w} map")));
        }
        Ok((self.channels * h * w * width * len) as u64)
    }
}

/// Strip projection on the channel-patched view `[N, P, G, H, W]`
/// (`P` patches of `G` channels). `weight` is `[P, L, k*L]`, `bias` `[P, L]`.
pub fn strip_mlp_1d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    axis: StripAxis,
    width: usize,
) -> Result<Tensor> {
    let [n, p, g, h, w] = *x.shape() else {
        return Err(Error::dim(format!("strip_mlp_1d expects [N, P, G, H, W], got {:?}", x.shape())));
    };
    if weight.rank() != 3 || weight.dim(0) != p {
        return Err(Error::config(format!("weight {:?} does not have {p} patches", weight.shape())));
    }
    let flat = ops::permute(x, &[0, 2, 1, 3, 4])?.reshape(&[n, g * p, h, w])?;
    let y = ops::strip_mix(&flat, weight, bias, axis, width)?;
    ops::permute(&y.reshape(&[n, g, p, h, w])?, &[0, 2, 1, 3, 4])
}

/// How the two strip projections of a CGSMM are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Row strip, fuse, column strip, fuse.
    #[default]
    Cascade,
    /// Row and column strips on the same input, one fuse.
    Parallel,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cascade" => Ok(Self::Cascade),
            "parallel" => Ok(Self::Parallel),
            _ => Err(Error::Parse(format!("unknown topology `{s}` (cascade|parallel)"))),
        }
    }
}

/// Group strip mixing over the full map.
#[derive(Debug, Clone)]
pub struct Cgsmm {
    pub channels: usize,
    pub topology: Topology,
    pub row: StripLayer,
    pub col: StripLayer,
    /// Cascade: `[fuse_w, fuse_h]`, each 2C -> C. Parallel: one 3C -> C fuse.
    pub fuses: Vec<Conv>,
}

impl Cgsmm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        channels: usize,
        hw: (usize, usize),
        patches: usize,
        width: usize,
        topology: Topology,
        has_bias: bool,
    ) -> Result<Self> {
        let (h, w) = hw;
        let strip = |axis: StripAxis| StripLayerConfig { axis, width, patches, len: axis.length(h, w) };
        let row = StripLayer::new(b, &format!("{name}.proj_w"), channels, strip(StripAxis::Row), has_bias)?;
        let col = StripLayer::new(b, &format!("{name}.proj_h"), channels, strip(StripAxis::Column), has_bias)?;
        let fuse = |b: &mut ParamBuilder, suffix: &str, inputs: usize| {
            Conv::new(
                b,
                &format!("{name}.{suffix}"),
                ConvSpec::pointwise(inputs * channels, channels).with_bias(has_bias),
            )
        };
        let fuses = match topology {
            Topology::Cascade => vec![fuse(b, "fuse_w", 2)?, fuse(b, "fuse_h", 2)?],
            Topology::Parallel => vec![fuse(b, "fuse", 3)?],
        };
        Ok(Self { channels, topology, row, col, fuses })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self.topology {
            Topology::Cascade => {
                let x_w = self.row.forward(cx, x)?;
                let cat = cx.graph.concat(&[x_w, x], 1)?;
                let x_w = self.fuses[0].forward(cx, cat)?;
                let x_h = self.col.forward(cx, x_w)?;
                let cat = cx.graph.concat(&[x_h, x], 1)?;
                self.fuses[1].forward(cx, cat)
            }
            Topology::Parallel => {
                let x_r = self.row.forward(cx, x)?;
                let x_c = self.col.forward(cx, x)?;
                let cat = cx.graph.concat(&[x_r, x_c, x], 1)?;
                self.fuses[0].forward(cx, cat)
            }
        }
    }

    /// Cost of the two strip projections alone.
    pub fn interaction_cost(&self, h: usize, w: usize) -> Result<Cost> {
        Ok(self.row.cost(h, w)? + self.col.cost(h, w)?)
    }

    pub fn fusion_cost(&self, h: usize, w: usize) -> Result<Cost> {
        self.fuses.iter().map(|f| f.cost(h, w)).sum()
    }
}

impl Layer for Cgsmm {
    fn children(&self) -> Vec<&dyn Layer> {
        let mut c: Vec<&dyn Layer> = vec![&self.row, &self.col];
        c.extend(self.fuses.iter().map(|f| f as &dyn Layer));
        c
    }
}
