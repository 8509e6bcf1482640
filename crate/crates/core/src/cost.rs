//! Parameter and FLOP accounting.
//!
//! FLOPs are multiply-accumulates of conv, linear and strip layers; bias
//! additions, normalization and activations are not counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{Cgsmm, Cost, Layer, Topology};
use crate::model::{ModelConfig, PartCost, StripMlp};
use crate::params::{ParamBuilder, ParamSpec};

pub const FLOPS_DEFINITION: &str = "FLOPs = multiply-accumulates of conv, linear and strip layers (bias adds excluded)";

/// `(weights, biases)` of a layer by traversal; norm affine terms excluded.
pub fn count_params(layer: &dyn Layer) -> (u64, u64) {
    let c = layer.params();
    (c.weights, c.biases)
}

pub fn count_flops(layer: &dyn Layer, h: usize, w: usize) -> Result<u64> {
    layer.macs(h, w)
}

/// Trainable element count of a spec list; the enumeration-side check of
/// [`Layer::params`].
pub fn enumerate_trainable(specs: &[ParamSpec]) -> u64 {
    specs.iter().filter(|s| s.role.trainable()).map(|s| s.numel() as u64).sum()
}

/// Cost of one token-mixing module split into its interaction and fusion steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MixingCost {
    pub interaction_params: u64,
    pub interaction_flops: u64,
    pub fusion_params: u64,
    pub fusion_flops: u64,
}

fn positive(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::config(format!("dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Axial token MLPs on rows and columns followed by a 3C -> C fuse.
pub fn sparse_mlp_baseline(h: usize, w: usize, c: usize) -> Result<MixingCost> {
    positive(&[h, w, c])?;
    let (h, w, c) = (h as u64, w as u64, c as u64);
    Ok(MixingCost {
        interaction_params: w * w + h * h,
        interaction_flops: c * h * w * (h + w),
        fusion_params: 3 * c * c,
        fusion_flops: 3 * h * w * c * c,
    })
}

/// Closed form for the cascade of two grouped strip layers and two 2C -> C fuses.
pub fn strip_mlp_formula(h: usize, w: usize, c: usize, patches: usize, width: usize) -> Result<MixingCost> {
    positive(&[h, w, c, patches, width])?;
    let (h, w, c, p, k) = (h as u64, w as u64, c as u64, patches as u64, width as u64);
    Ok(MixingCost {
        interaction_params: k * p * (h * h + w * w),
        interaction_flops: k * c * h * w * (h + w),
        fusion_params: 4 * c * c,
        fusion_flops: 4 * h * w * c * c,
    })
}

/// Weights and MACs of a built cascade CGSMM, counted by traversal.
pub fn cgsmm_cost(c: usize, size: usize, patches: usize, width: usize) -> Result<(Cost, Cost)> {
    let mut b = ParamBuilder::shapes_only();
    let m = Cgsmm::new(&mut b, "cgsmm", c, (size, size), patches, width, Topology::Cascade, true)?;
    Ok((m.interaction_cost(size, size)?, m.fusion_cost(size, size)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    K,
    M,
    G,
}

impl Unit {
    fn scale(self) -> f64 {
        match self {
            Unit::K => 1e3,
            Unit::M => 1e6,
            Unit::G => 1e9,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Unit::K => "k",
            Unit::M => "M",
            Unit::G => "G",
        }
    }
}

/// Two-decimal value in the largest of k/M/G not below `floor` that keeps it >= 1.
fn typeset(v: u64, floor: Unit) -> (f64, String) {
    let unit = [Unit::G, Unit::M, Unit::K].into_iter().find(|u| v as f64 >= u.scale() || *u == floor).unwrap_or(floor);
    let text = format!("{:.2}", v as f64 / unit.scale());
    let value: f64 = text.parse().unwrap_or(f64::NAN);
    (value * unit.scale(), format!("{text}{}", unit.suffix()))
}

pub fn typeset_params(v: u64) -> String {
    typeset(v, Unit::K).1
}

pub fn typeset_flops(v: u64) -> String {
    typeset(v, Unit::M).1
}

/// A printed count: exact value, typeset text and the value the text denotes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub exact: u64,
    pub text: String,
    pub typeset_value: f64,
}

impl Cell {
    fn params(v: u64) -> Self {
        let (typeset_value, text) = typeset(v, Unit::K);
        Self { exact: v, text, typeset_value }
    }

    fn flops(v: u64) -> Self {
        let (typeset_value, text) = typeset(v, Unit::M);
        Self { exact: v, text, typeset_value }
    }
}

/// One report record.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Count {
        design: String,
        scope: String,
        params: Cell,
        /// Bias terms, reported apart from `params`.
        params_biases: u64,
        flops: Cell,
    },
    /// Stage-1 over stage-4 ratio, from the typeset cells and from exact counts.
    Changes { design: String, params: f64, flops: f64, params_exact: f64, flops_exact: f64 },
    /// Interaction share of the stage-4 module, in percent.
    Proportion { design: String, params_pct: f64, flops_pct: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Table1Config {
    pub stage1_size: usize,
    pub stage4_size: usize,
    pub stage1_channels: usize,
    pub stage4_channels: usize,
    /// Patch count is `channels / patch_divisor`.
    pub patch_divisor: usize,
    pub strip_width: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            stage1_size: 56,
            stage4_size: 7,
            stage1_channels: 112,
            stage4_channels: 896,
            patch_divisor: 4,
            strip_width: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub flops_definition: String,
    pub config: Table1Config,
    pub records: Vec<Record>,
}

pub const SPARSE: &str = "sparse-mlp";
pub const STRIP: &str = "strip-mlp";
pub const STAGE1: &str = "stage1";
pub const STAGE4: &str = "stage4";
pub const FUSION4: &str = "stage4-fusion";

struct Column {
    design: &'static str,
    stage1: MixingCost,
    stage4: MixingCost,
    biases: [u64; 3],
}

fn strip_column(cfg: &Table1Config) -> Result<Column> {
    let stage = |c: usize, size: usize| -> Result<(MixingCost, u64, u64)> {
        if !c.is_multiple_of(cfg.patch_divisor) {
            return Err(Error::config(format!("{c} channels not divisible by {}", cfg.patch_divisor)));
        }
        let (inter, fuse) = cgsmm_cost(c, size, c / cfg.patch_divisor, cfg.strip_width)?;
        Ok((
            MixingCost {
                interaction_params: inter.weights,
                interaction_flops: inter.macs,
                fusion_params: fuse.weights,
                fusion_flops: fuse.macs,
            },
            inter.biases,
            fuse.biases,
        ))
    };
    let (s1, b1, _) = stage(cfg.stage1_channels, cfg.stage1_size)?;
    let (s4, b4, f4) = stage(cfg.stage4_channels, cfg.stage4_size)?;
    Ok(Column { design: STRIP, stage1: s1, stage4: s4, biases: [b1, b4, f4] })
}

impl Column {
    fn records(&self) -> Vec<Record> {
        let design = self.design.to_string();
        let count = |scope: &str, p: u64, b: u64, f: u64| Record::Count {
            design: design.clone(),
            scope: scope.into(),
            params: Cell::params(p),
            params_biases: b,
            flops: Cell::flops(f),
        };
        let (s1, s4) = (&self.stage1, &self.stage4);
        let ratio = |a: f64, b: f64| a / b;
        let pct = |a: u64, b: u64| 100.0 * a as f64 / (a + b) as f64;
        vec![
            count(STAGE1, s1.interaction_params, self.biases[0], s1.interaction_flops),
            count(STAGE4, s4.interaction_params, self.biases[1], s4.interaction_flops),
            Record::Changes {
                design: design.clone(),
                params: ratio(
                    Cell::params(s1.interaction_params).typeset_value,
                    Cell::params(s4.interaction_params).typeset_value,
                ),
                flops: ratio(
                    Cell::flops(s1.interaction_flops).typeset_value,
                    Cell::flops(s4.interaction_flops).typeset_value,
                ),
                params_exact: ratio(s1.interaction_params as f64, s4.interaction_params as f64),
                flops_exact: ratio(s1.interaction_flops as f64, s4.interaction_flops as f64),
            },
            count(FUSION4, s4.fusion_params, self.biases[2], s4.fusion_flops),
            Record::Proportion {
                design: design.clone(),
                params_pct: pct(s4.interaction_params, s4.fusion_params),
                flops_pct: pct(s4.interaction_flops, s4.fusion_flops),
            },
        ]
    }
}

/// Interaction and fusion costs of both designs at stages 1 and 4.
pub fn table1(cfg: &Table1Config) -> Result<CostReport> {
    let sparse = Column {
        design: SPARSE,
        stage1: sparse_mlp_baseline(cfg.stage1_size, cfg.stage1_size, cfg.stage1_channels)?,
        stage4: sparse_mlp_baseline(cfg.stage4_size, cfg.stage4_size, cfg.stage4_channels)?,
        biases: [0; 3],
    };
    let strip = strip_column(cfg)?;
    let mut records = sparse.records();
    records.extend(strip.records());
    Ok(CostReport { flops_definition: FLOPS_DEFINITION.into(), config: *cfg, records })
}

impl CostReport {
    pub fn count(&self, design: &str, scope: &str) -> Option<(&Cell, &Cell)> {
        self.records.iter().find_map(|r| match r {
            Record::Count { design: d, scope: s, params, flops, .. } if d == design && s == scope => {
                Some((params, flops))
            }
            _ => None,
        })
    }

    /// `(params, flops, params_exact, flops_exact)`.
    pub fn changes(&self, design: &str) -> Option<(f64, f64, f64, f64)> {
        self.records.iter().find_map(|r| match r {
            Record::Changes { design: d, params, flops, params_exact, flops_exact } if d == design => {
                Some((*params, *flops, *params_exact, *flops_exact))
            }
            _ => None,
        })
    }

    pub fn proportion(&self, design: &str) -> Option<(f64, f64)> {
        self.records.iter().find_map(|r| match r {
            Record::Proportion { design: d, params_pct, flops_pct } if d == design => Some((*params_pct, *flops_pct)),
            _ => None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let designs = [SPARSE, STRIP];
        let mut rows: Vec<[String; 5]> = vec![[
            "Items".into(),
            "Sparse Params".into(),
            "Sparse FLOPs".into(),
            "Strip Params".into(),
            "Strip FLOPs".into(),
        ]];
        let mut push = |label: &str, f: &dyn Fn(&str) -> (String, String)| {
            let (a, b) = f(designs[0]);
            let (c, d) = f(designs[1]);
            rows.push([label.into(), a, b, c, d]);
        };
        let cells = |scope: &'static str| {
            move |d: &str| self.count(d, scope).map(|(p, f)| (p.text.clone(), f.text.clone())).unwrap_or_default()
        };
        push("Stage 1", &cells(STAGE1));
        push("Stage 4", &cells(STAGE4));
        push("Changes", &|d| {
            self.changes(d).map(|(p, f, _, _)| (format!("↓{p:.2}"), format!("↓{f:.2}"))).unwrap_or_default()
        });
        push("Stage 4 Fusion", &cells(FUSION4));
        push("Proportion", &|d| {
            self.proportion(d).map(|(p, f)| (format!("{p:.2}%"), format!("{f:.2}%"))).unwrap_or_default()
        });
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.flops_definition);
        let c = &self.config;
        let _ = writeln!(
            out,
            "# H1=W1={}, H4=W4={}, C1={}, C4={}, P=C/{}, strip width {}",
            c.stage1_size, c.stage4_size, c.stage1_channels, c.stage4_channels, c.patch_divisor, c.strip_width
        );
        out.push_str(&align(&rows));
        out.push_str("\nExact counts\n");
        let mut exact: Vec<[String; 5]> =
            vec![["design".into(), "scope".into(), "params".into(), "biases".into(), "flops".into()]];
        for r in &self.records {
            if let Record::Count { design, scope, params, params_biases, flops } = r {
                exact.push([
                    design.clone(),
                    scope.clone(),
                    params.exact.to_string(),
                    params_biases.to_string(),
                    flops.exact.to_string(),
                ]);
            }
        }
        out.push_str(&align(&exact));
        for d in designs {
            if let Some((_, _, p, f)) = self.changes(d) {
                let _ = writeln!(out, "{d} exact stage ratio: params ↓{p:.4}, flops ↓{f:.4}");
            }
            if let Some((p, f)) = self.proportion(d) {
                let _ = writeln!(out, "{d} stage-4 interaction share: params {p:.4}%, flops {f:.4}%");
            }
        }
        out
    }
}

fn align<const N: usize>(rows: &[[String; N]]) -> String {
    let widths: Vec<usize> = (0..N).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

/// Whole-model breakdown by part.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub flops_definition: String,
    pub config: ModelConfig,
    pub parts: Vec<PartCost>,
    pub total: Cost,
    /// Trainable elements counted from the parameter specs.
    pub enumerated_params: u64,
}

pub fn model_report(cfg: &ModelConfig) -> Result<ModelReport> {
    let (model, specs) = StripMlp::describe(cfg)?;
    let parts = model.part_costs()?;
    let total = parts.iter().map(|p| p.cost).sum();
    Ok(ModelReport {
        flops_definition: FLOPS_DEFINITION.into(),
        config: cfg.clone(),
        parts,
        total,
        enumerated_params: enumerate_trainable(&specs),
    })
}

impl ModelReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<[String; 6]> =
            vec![["part".into(), "weights".into(), "biases".into(), "norm".into(), "params".into(), "flops".into()]];
        let row = |name: &str, c: &Cost| {
            [
                name.to_string(),
                c.weights.to_string(),
                c.biases.to_string(),
                c.norm.to_string(),
                format!("{} ({})", c.params(), typeset_params(c.params())),
                format!("{} ({})", c.macs, typeset_flops(c.macs)),
            ]
        };
        rows.extend(self.parts.iter().map(|p| row(&p.part, &p.cost)));
        rows.push(row("total", &self.total));
        let c = &self.config;
        format!(
            "# {}\n# C={} depths={:?} p={} classes={} input={}x{} patches={} channel ratio={}\n{}",
            self.flops_definition,
            c.channels,
            c.depths,
            c.patch_size,
            c.num_classes,
            c.image_size,
            c.image_size,
            c.patch_policy,
            c.channel_ratio,
            align(&rows)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typesetting_units() {
        assert_eq!(typeset_params(526_848), "526.85k");
        assert_eq!(typeset_params(98), "0.10k");
        assert_eq!(typeset_params(3_211_264), "3.21M");
        assert_eq!(typeset_flops(614_656), "0.61M");
        assert_eq!(typeset_flops(157_351_936), "157.35M");
        assert_eq!(typeset_flops(2_619_794_400), "2.62G");
    }

    #[test]
    fn baseline_rejects_zero() {
        assert!(sparse_mlp_baseline(0, 7, 8).is_err());
    }

    #[test]
    fn changes_use_typeset_cells() {
        let r = table1(&Table1Config::default()).unwrap();
        let (p, _, pe, _) = r.changes(SPARSE).unwrap();
        assert!((p - 62.7).abs() < 1e-9);
        assert!((pe - 6272.0 / 98.0).abs() < 1e-12);
    }
}
