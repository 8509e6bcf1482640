use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::ConvSpec;

use super::{Conv, Ctx, Layer, Linear};

/// Bottleneck reduction of the re-weight MLP.
pub const REWEIGHT_REDUCTION: usize = 4;

/// Softmax-weighted sum of equally shaped branches, one weight per
/// (sample, channel, branch).
#[derive(Debug, Clone)]
pub struct Reweight {
    pub channels: usize,
    pub branches: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Reweight {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, branches: usize) -> Result<Self> {
        if branches < 2 {
            return Err(Error::config("re-weight needs at least two branches"));
        }
        let hidden = (channels / REWEIGHT_REDUCTION).max(1);
        Ok(Self {
            channels,
            branches,
            fc1: Linear::new(b, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, branches * channels)?,
        })
    }

    /// Branch weights `[N, C, B]`; sums to one over the last axis.
    pub fn attention(&self, cx: &mut Ctx<'_>, branches: &[Var]) -> Result<Var> {
        if branches.len() != self.branches {
            return Err(Error::dim(format!("re-weight built for {} branches, got {}", self.branches, branches.len())));
        }
        let first = cx.value(branches[0]).shape().to_vec();
        if branches.iter().any(|&v| cx.value(v).shape() != first.as_slice()) {
            return Err(Error::dim("re-weight branches differ in shape"));
        }
        let n = first.first().copied().unwrap_or(0);
        let mut total = branches[0];
        for &v in &branches[1..] {
            total = cx.graph.add(total, v)?;
        }
        let pooled = cx.graph.global_avg_pool(total)?;
        let hidden = self.fc1.forward(cx, pooled)?;
        let hidden = cx.graph.gelu(hidden)?;
        let logits = self.fc2.forward(cx, hidden)?;
        let logits = cx.graph.reshape(logits, &[n, self.channels, self.branches])?;
        cx.graph.softmax(logits, 2)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, branches: &[Var]) -> Result<Var> {
        let a = self.attention(cx, branches)?;
        let n = cx.value(a).dim(0);
        let mut out: Option<Var> = None;
        for (i, &branch) in branches.iter().enumerate() {
            let a_b = cx.graph.slice(a, 2, i, 1)?;
            let a_b = cx.graph.reshape(a_b, &[n, self.channels])?;
            let term = cx.graph.channel_scale(branch, a_b)?;
            out = Some(match out {
                Some(acc) => cx.graph.add(acc, term)?,
                None => term,
            });
        }
        out.ok_or_else(|| Error::dim("re-weight over no branches"))
    }
}

impl Layer for Reweight {
    fn children(&self) -> Vec<&dyn Layer> {
        vec![&self.fc1, &self.fc2]
    }
}

/// Local strip mixing: depth-wise 3x7 and 7x3 windows merged by a re-weight.
#[derive(Debug, Clone)]
pub struct Lsmm {
    pub channels: usize,
    pub row: Conv,
    pub col: Conv,
    pub reweight: Reweight,
}

/// Strip width and length of the local unit.
pub const LOCAL_STRIP: (usize, usize) = (3, 7);

impl Lsmm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let (width, len) = LOCAL_STRIP;
        Ok(Self {
            channels,
            row: Conv::new(b, &format!("{name}.row"), ConvSpec::depthwise(channels, (width, len)))?,
            col: Conv::new(b, &format!("{name}.col"), ConvSpec::depthwise(channels, (len, width)))?,
            reweight: Reweight::new(b, &format!("{name}.reweight"), channels, 2)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let r = self.row.forward(cx, x)?;
        let c = self.col.forward(cx, x)?;
        self.reweight.forward(cx, &[r, c])
    }
}

impl Layer for Lsmm {
    fn children(&self) -> Vec<&dyn Layer> {
        vec![&self.row, &self.col, &self.reweight]
    }
}
