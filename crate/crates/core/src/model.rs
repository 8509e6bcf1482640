//! The four-stage network and its named variants.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{
    BlockConfig, Branches, ChannelMixingBlock, Conv, Cost, Ctx, Layer, Linear, PatchEmbed, PatchMerge, PatchPolicy,
    StripMixingBlock, Topology,
};
use crate::params::{ParamBuilder, ParamSpec, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tstar")]
    TStar,
    #[serde(rename = "t")]
    T,
    #[serde(rename = "s")]
    S,
    #[serde(rename = "b")]
    B,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TStar, Variant::T, Variant::S, Variant::B];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TStar => "T*",
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
        }
    }

    pub fn width(self) -> usize {
        match self {
            Variant::TStar | Variant::T => 80,
            Variant::S => 96,
            Variant::B => 112,
        }
    }

    pub fn depths(self) -> [usize; STAGES] {
        match self {
            Variant::TStar => [2, 2, 6, 2],
            Variant::T => [2, 2, 12, 2],
            Variant::S | Variant::B => [2, 2, 18, 2],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t*" | "tstar" | "t-star" => Ok(Variant::TStar),
            "t" => Ok(Variant::T),
            "s" => Ok(Variant::S),
            "b" => Ok(Variant::B),
            _ => Err(Error::Parse(format!("unknown variant `{s}` (t*|t|s|b)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Stage-1 width; stage `s` has `channels * 2^(s-1)`.
    pub channels: usize,
    pub depths: [usize; STAGES],
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Side of the square input image.
    pub image_size: usize,
    pub strip_width: usize,
    pub patch_policy: PatchPolicy,
    pub topology: Topology,
    pub branches: Branches,
    pub mlp_ratio: usize,
    pub channel_ratio: usize,
    /// Stage-1 to stage-3 and stage-2 to stage-4 skip convolutions.
    pub skips: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::variant(Variant::TStar)
    }
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        Self {
            channels: v.width(),
            depths: v.depths(),
            patch_size: 4,
            in_channels: 3,
            num_classes: 1000,
            image_size: 224,
            strip_width: 3,
            patch_policy: PatchPolicy::C4,
            topology: Topology::Cascade,
            branches: Branches::Both,
            mlp_ratio: 1,
            channel_ratio: BlockConfig::DEFAULT_CHANNEL_RATIO,
            skips: true,
        }
    }

    /// Parses a TOML table of model fields; missing fields take the T* defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.channels << s
    }

    /// Spatial side of stage `s` (0-based).
    pub fn stage_size(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    pub fn block_config(&self, s: usize) -> BlockConfig {
        BlockConfig {
            channels: self.stage_channels(s),
            strip_width: self.strip_width,
            patch_policy: self.patch_policy,
            branches: self.branches,
            topology: self.topology,
            mlp_ratio: self.mlp_ratio,
            channel_ratio: self.channel_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("image_size", self.image_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.depths.contains(&0) {
            return Err(Error::config(format!("depths must be positive, got {:?}", self.depths)));
        }
        let unit = self.patch_size * 8;
        if !self.image_size.is_multiple_of(unit) {
            return Err(Error::config(format!(
                "image size {} is not divisible by 8 x patch size = {unit}",
                self.image_size
            )));
        }
        (0..STAGES).try_for_each(|s| self.block_config(s).validate())
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub channels: usize,
    pub size: usize,
    pub blocks: Vec<(StripMixingBlock, ChannelMixingBlock)>,
}

#[derive(Debug, Clone)]
pub struct StripMlp {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub merges: Vec<PatchMerge>,
    /// Stage-1 output into stage-3 input, stage-2 output into stage-4 input.
    pub skips: Vec<Conv>,
    pub head: Linear,
}

/// One row of a per-part cost breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartCost {
    pub part: String,
    #[serde(flatten)]
    pub cost: Cost,
}

fn labelled<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_layer(name))
}

impl StripMlp {
    /// Builds the network with freshly initialized parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut b = ParamBuilder::materialized(seed);
        let model = Self::assemble(cfg, &mut b)?;
        Ok((model, b.into_store()?))
    }

    /// Builds the structure only; parameter tensors are not allocated.
    pub fn describe(cfg: &ModelConfig) -> Result<(Self, Vec<ParamSpec>)> {
        let mut b = ParamBuilder::shapes_only();
        let model = Self::assemble(cfg, &mut b)?;
        Ok((model, b.into_specs()))
    }

    fn assemble(cfg: &ModelConfig, b: &mut ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(b, "embed", cfg.in_channels, cfg.channels, cfg.patch_size)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            let (c, size) = (cfg.stage_channels(s), cfg.stage_size(s));
            let blocks = (0..cfg.depths[s])
                .map(|i| {
                    let prefix = format!("stages.{s}.blocks.{i}");
                    Ok((
                        StripMixingBlock::new(b, &format!("{prefix}.mix"), cfg.block_config(s), (size, size))?,
                        ChannelMixingBlock::new(b, &format!("{prefix}.chan"), c, cfg.channel_ratio)?,
                    ))
                })
                .collect::<Result<_>>()?;
            stages.push(Stage { channels: c, size, blocks });
            if s + 1 < STAGES {
                merges.push(PatchMerge::new(b, &format!("merges.{s}"), c)?);
            }
        }
        let skips = if cfg.skips {
            (0..2)
                .map(|s| {
                    let c = cfg.stage_channels(s);
                    Conv::new(b, &format!("skips.{s}"), ConvSpec::patchify(c, 4 * c, 4))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let head = Linear::new(b, "head", cfg.stage_channels(STAGES - 1), cfg.num_classes)?;
        Ok(Self { cfg: cfg.clone(), embed, stages, merges, skips, head })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.cfg.image_size;
        [batch, self.cfg.in_channels, s, s]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if [n, c, h, w] != self.input_shape(n) {
            return Err(Error::config(format!(
                "model expects [N, {}, {s}, {s}] input, got {:?}",
                self.cfg.in_channels,
                x.shape(),
                s = self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Logits `[N, classes]` for a batch already bound in `cx`.
    pub fn forward(&self, cx: &mut Ctx<'_>, img: Var) -> Result<Var> {
        self.check_input(cx.value(img))?;
        let mut x = labelled("embed", self.embed.forward(cx, img))?;
        let mut skip_out: Vec<Var> = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            if s >= 2 {
                if let Some(conv) = self.skips.get(s - 2) {
                    let name = format!("skips.{}", s - 2);
                    let y = labelled(&name, conv.forward(cx, skip_out[s - 2]))?;
                    x = labelled(&name, cx.graph.add(x, y))?;
                }
            }
            for (i, (mix, chan)) in stage.blocks.iter().enumerate() {
                x = labelled(&format!("stages.{s}.blocks.{i}.mix"), mix.forward(cx, x))?;
                x = labelled(&format!("stages.{s}.blocks.{i}.chan"), chan.forward(cx, x))?;
            }
            skip_out.push(x);
            if let Some(merge) = self.merges.get(s) {
                x = labelled(&format!("merges.{s}"), merge.forward(cx, x))?;
            }
        }
        let pooled = labelled("pool", cx.graph.global_avg_pool(x))?;
        labelled("head", self.head.forward(cx, pooled))
    }

    /// Eval-mode logits.
    pub fn logits(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cx = Ctx::inference(store);
        let input = cx.input(x.clone());
        let out = self.forward(&mut cx, input)?;
        Ok(cx.value(out).clone())
    }

    /// Cost per part: embed, each stage, each merge, skips, head.
    pub fn part_costs(&self) -> Result<Vec<PartCost>> {
        let base = self.cfg.image_size / self.cfg.patch_size;
        let mut rows =
            vec![PartCost { part: "embed".into(), cost: self.embed.cost(self.cfg.image_size, self.cfg.image_size)? }];
        for (s, stage) in self.stages.iter().enumerate() {
            let n = stage.size;
            let cost = stage.blocks.iter().map(|(m, c)| Ok(m.cost(n, n)? + c.cost(n, n)?)).sum::<Result<Cost>>()?;
            rows.push(PartCost { part: format!("stage{}", s + 1), cost });
            if let Some(m) = self.merges.get(s) {
                rows.push(PartCost { part: format!("merge{}", s + 1), cost: m.cost(n, n)? });
            }
        }
        for (i, conv) in self.skips.iter().enumerate() {
            let n = base >> i;
            rows.push(PartCost { part: format!("skip{}to{}", i + 1, i + 3), cost: conv.cost(n, n)? });
        }
        rows.push(PartCost { part: "head".into(), cost: self.head.cost(1, 1)? });
        Ok(rows)
    }

    pub fn total_cost(&self) -> Result<Cost> {
        Ok(self.part_costs()?.into_iter().map(|r| r.cost).sum())
    }
}

impl Layer for StripMlp {
    fn children(&self) -> Vec<&dyn Layer> {
        let mut c: Vec<&dyn Layer> = vec![&self.embed];
        for (s, stage) in self.stages.iter().enumerate() {
            for (m, ch) in &stage.blocks {
                c.push(m);
                c.push(ch);
            }
            if let Some(m) = self.merges.get(s) {
                c.push(m);
            }
        }
        c.extend(self.skips.iter().map(|s| s as &dyn Layer));
        c.push(&self.head);
        c
    }

    fn macs(&self, h: usize, w: usize) -> Result<u64> {
        if (h, w) != (self.cfg.image_size, self.cfg.image_size) {
            return Err(Error::config(format!("model is built for {s}x{s} input", s = self.cfg.image_size)));
        }
        Ok(self.part_costs()?.iter().map(|r| r.cost.macs).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_schedule() {
        let cfg = ModelConfig::variant(Variant::B);
        assert_eq!(cfg.stage_channels(3), 896);
        assert_eq!(cfg.stage_size(0), 56);
        assert_eq!(cfg.stage_size(3), 7);
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let cfg = ModelConfig { image_size: 100, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
