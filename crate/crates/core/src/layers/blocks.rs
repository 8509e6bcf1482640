use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::ConvSpec;

use super::{BatchNorm2d, Cgsmm, Conv, Ctx, Grn, Layer, Lsmm, Topology};

/// Patch count of a CGSMM as a function of its channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PatchPolicy {
    #[serde(rename = "c1")]
    C1,
    #[serde(rename = "c2")]
    C2,
    #[default]
    #[serde(rename = "c4")]
    C4,
    #[serde(rename = "c8")]
    C8,
    #[serde(rename = "one")]
    One,
}

impl PatchPolicy {
    pub fn patches(self, channels: usize) -> Result<usize> {
        let div = match self {
            PatchPolicy::C1 => 1,
            PatchPolicy::C2 => 2,
            PatchPolicy::C4 => 4,
            PatchPolicy::C8 => 8,
            PatchPolicy::One => return Ok(1),
        };
        if !channels.is_multiple_of(div) || channels < div {
            return Err(Error::config(format!(
                "patch policy {self} needs channels divisible by {div}, got {channels}"
            )));
        }
        Ok(channels / div)
    }
}

impl std::fmt::Display for PatchPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchPolicy::C1 => "c/1",
            PatchPolicy::C2 => "c/2",
            PatchPolicy::C4 => "c/4",
            PatchPolicy::C8 => "c/8",
            PatchPolicy::One => "one",
        })
    }
}

impl std::str::FromStr for PatchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('/', "").as_str() {
            "c" | "c1" => Ok(Self::C1),
            "c2" => Ok(Self::C2),
            "c4" => Ok(Self::C4),
            "c8" => Ok(Self::C8),
            "1" | "one" => Ok(Self::One),
            _ => Err(Error::Parse(format!("unknown patch policy `{s}` (c/1|c/2|c/4|c/8|one)"))),
        }
    }
}

/// Which token-mixing modules a strip mixing block keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branches {
    #[default]
    Both,
    CgsmmOnly,
    LsmmOnly,
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "cgsmm-only" => Ok(Self::CgsmmOnly),
            "lsmm-only" => Ok(Self::LsmmOnly),
            _ => Err(Error::Parse(format!("unknown branch selection `{s}` (both|cgsmm-only|lsmm-only)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub strip_width: usize,
    pub patch_policy: PatchPolicy,
    pub branches: Branches,
    pub topology: Topology,
    /// Expansion of the FC in front of the token mixers.
    pub mlp_ratio: usize,
    /// Expansion of the channel mixing block.
    pub channel_ratio: usize,
}

impl BlockConfig {
    pub const DEFAULT_CHANNEL_RATIO: usize = 3;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            strip_width: 3,
            patch_policy: PatchPolicy::C4,
            branches: Branches::Both,
            topology: Topology::Cascade,
            mlp_ratio: 1,
            channel_ratio: Self::DEFAULT_CHANNEL_RATIO,
        }
    }

    pub fn mixer_channels(&self) -> usize {
        self.mlp_ratio * self.channels
    }

    /// Channels seen by each token-mixing branch.
    pub fn branch_channels(&self) -> usize {
        match self.branches {
            Branches::Both => self.mixer_channels() / 2,
            _ => self.mixer_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.mlp_ratio == 0 || self.channel_ratio == 0 {
            return Err(Error::config("channels and expansion ratios must be positive"));
        }
        if self.branches == Branches::Both && !self.mixer_channels().is_multiple_of(2) {
            return Err(Error::config(format!(
                "{} mixer channels cannot be split between two branches",
                self.mixer_channels()
            )));
        }
        if self.strip_width.is_multiple_of(2) {
            return Err(Error::config(format!("strip width must be odd, got {}", self.strip_width)));
        }
        if self.branches != Branches::LsmmOnly {
            self.patch_policy.patches(self.branch_channels())?;
        }
        Ok(())
    }
}

fn check_input(cx: &Ctx<'_>, x: Var, channels: usize, hw: Option<(usize, usize)>, what: &str) -> Result<()> {
    let (_, c, h, w) = cx.value(x).dims4()?;
    if c != channels || hw.is_some_and(|hw| hw != (h, w)) {
        return Err(Error::dim(format!(
            "{what} built for {channels} channels{}, got {:?}",
            hw.map(|(h, w)| format!(" at {h}x{w}")).unwrap_or_default(),
            cx.value(x).shape()
        )));
    }
    Ok(())
}

/// Depth-wise conv, FC, BN, GELU, then CGSMM and LSMM on channel halves,
/// an output FC and a residual connection.
#[derive(Debug, Clone)]
pub struct StripMixingBlock {
    pub cfg: BlockConfig,
    pub hw: (usize, usize),
    pub dwconv: Conv,
    pub fc_in: Conv,
    pub bn: BatchNorm2d,
    pub cgsmm: Option<Cgsmm>,
    pub lsmm: Option<Lsmm>,
    pub fc_out: Conv,
}

impl StripMixingBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: BlockConfig, hw: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let m = cfg.mixer_channels();
        let half = cfg.branch_channels();
        let dwconv = Conv::new(b, &format!("{name}.dwconv"), ConvSpec::depthwise(c, (3, 3)))?;
        let fc_in = Conv::new(b, &format!("{name}.fc_in"), ConvSpec::pointwise(c, m))?;
        let bn = BatchNorm2d::new(b, &format!("{name}.bn"), m)?;
        let cgsmm = (cfg.branches != Branches::LsmmOnly)
            .then(|| {
                Cgsmm::new(
                    b,
                    &format!("{name}.cgsmm"),
                    half,
                    hw,
                    cfg.patch_policy.patches(half)?,
                    cfg.strip_width,
                    cfg.topology,
                    true,
                )
            })
            .transpose()?;
        let lsmm =
            (cfg.branches != Branches::CgsmmOnly).then(|| Lsmm::new(b, &format!("{name}.lsmm"), half)).transpose()?;
        let fc_out = Conv::new(b, &format!("{name}.fc_out"), ConvSpec::pointwise(m, c))?;
        Ok(Self { cfg, hw, dwconv, fc_in, bn, cgsmm, lsmm, fc_out })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_input(cx, x, self.cfg.channels, Some(self.hw), "strip mixing block")?;
        let t = self.dwconv.forward(cx, x)?;
        let t = self.fc_in.forward(cx, t)?;
        let t = self.bn.forward(cx, t)?;
        let t = cx.graph.gelu(t)?;
        let mixed = match (&self.cgsmm, &self.lsmm) {
            (Some(g), Some(l)) => {
                let half = self.cfg.branch_channels();
                let parts = cx.graph.split(t, 1, &[half, half])?;
                let a = g.forward(cx, parts[0])?;
                let b = l.forward(cx, parts[1])?;
                cx.graph.concat(&[a, b], 1)?
            }
            (Some(g), None) => g.forward(cx, t)?,
            (None, Some(l)) => l.forward(cx, t)?,
            (None, None) => return Err(Error::config("strip mixing block without token mixers")),
        };
        let y = self.fc_out.forward(cx, mixed)?;
        cx.graph.add(y, x)
    }
}

impl Layer for StripMixingBlock {
    fn children(&self) -> Vec<&dyn Layer> {
        let mut c: Vec<&dyn Layer> = vec![&self.dwconv, &self.fc_in, &self.bn];
        if let Some(g) = &self.cgsmm {
            c.push(g);
        }
        if let Some(l) = &self.lsmm {
            c.push(l);
        }
        c.push(&self.fc_out);
        c
    }
}

/// Inverted bottleneck with GRN: expand, GELU, GRN, project, residual.
#[derive(Debug, Clone)]
pub struct ChannelMixingBlock {
    pub channels: usize,
    pub ratio: usize,
    pub expand: Conv,
    pub grn: Grn,
    pub project: Conv,
}

impl ChannelMixingBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::config("channel mixing ratio must be at least 1"));
        }
        let hidden = ratio * channels;
        Ok(Self {
            channels,
            ratio,
            expand: Conv::new(b, &format!("{name}.expand"), ConvSpec::pointwise(channels, hidden))?,
            grn: Grn::new(b, &format!("{name}.grn"), hidden)?,
            project: Conv::new(b, &format!("{name}.project"), ConvSpec::pointwise(hidden, channels))?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_input(cx, x, self.channels, None, "channel mixing block")?;
        let t = self.expand.forward(cx, x)?;
        let t = cx.graph.gelu(t)?;
        let t = self.grn.forward(cx, t)?;
        let t = self.project.forward(cx, t)?;
        cx.graph.add(t, x)
    }
}

impl Layer for ChannelMixingBlock {
    fn children(&self) -> Vec<&dyn Layer> {
        vec![&self.expand, &self.grn, &self.project]
    }
}

/// Non-overlapping `p x p` patches projected to `C` channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub conv: Conv,
}

impl PatchEmbed {
    pub fn new(b: &mut ParamBuilder, name: &str, in_channels: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        let conv = Conv::new(b, name, ConvSpec::patchify(in_channels, channels, patch))?;
        Ok(Self { patch, conv })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, img: Var) -> Result<Var> {
        let (_, _, h, w) = cx.value(img).dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::config(format!("{h}x{w} image is not divisible into {p}x{p} patches", p = self.patch)));
        }
        self.conv.forward(cx, img)
    }
}

impl Layer for PatchEmbed {
    fn children(&self) -> Vec<&dyn Layer> {
        vec![&self.conv]
    }
}

/// Each 2x2 neighbourhood (4C values) mapped linearly to 2C channels.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub conv: Conv,
}

impl PatchMerge {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(b, name, ConvSpec::patchify(channels, 2 * channels, 2))? })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (_, _, h, w) = cx.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("cannot merge an odd {h}x{w} map")));
        }
        self.conv.forward(cx, x)
    }
}

impl Layer for PatchMerge {
    fn children(&self) -> Vec<&dyn Layer> {
        vec![&self.conv]
    }
}
