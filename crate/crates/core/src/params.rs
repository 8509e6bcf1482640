//! Named learnable tensors and their allocation.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Conv, linear and strip projection matrices.
    Weight,
    Bias,
    /// BN / GRN scale.
    NormScale,
    /// BN / GRN shift.
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Only projection weights take weight decay.
    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered name -> tensor map with per-entry role flags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.specs[id.0].role
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let spec = &self.specs[id.0];
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::TensorShape {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSpec, &Tensor)> {
        self.specs.iter().zip(&self.values).enumerate().map(|(i, (s, t))| (ParamId(i), s, t))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.specs.iter().filter(|s| s.role.trainable()).map(ParamSpec::numel).sum()
    }
}

/// Allocates parameters, either with initialized values or as shapes only.
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    values: Option<(Vec<Tensor>, ChaCha8Rng)>,
    index: HashMap<String, ParamId>,
}

impl ParamBuilder {
    pub fn materialized(seed: u64) -> Self {
        Self { specs: Vec::new(), values: Some((Vec::new(), ChaCha8Rng::seed_from_u64(seed))), index: HashMap::new() }
    }

    pub fn shapes_only() -> Self {
        Self { specs: Vec::new(), values: None, index: HashMap::new() }
    }

    pub fn alloc(&mut self, name: &str, shape: &[usize], role: ParamRole, init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.specs.len());
        if let Some((values, rng)) = &mut self.values {
            let numel = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::TruncNormal { std } => {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    (0..numel)
                        .map(|_| loop {
                            let v: f64 = normal.sample(rng);
                            if v.abs() <= 2.0 * std {
                                break v;
                            }
                        })
                        .collect()
                }
            };
            values.push(Tensor::from_vec(shape, data)?);
        }
        self.specs.push(ParamSpec { name: name.to_string(), shape: shape.to_vec(), role });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.alloc(name, shape, ParamRole::Weight, Init::TruncNormal { std: INIT_STD })
    }

    pub fn bias(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.alloc(name, shape, ParamRole::Bias, Init::Zeros)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }

    pub fn into_store(self) -> Result<ParamStore> {
        let (values, _) = self.values.ok_or_else(|| Error::config("shape-only builder has no values"))?;
        Ok(ParamStore { specs: self.specs, values, index: self.index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_and_unique_names() {
        let build = || {
            let mut b = ParamBuilder::materialized(7);
            b.weight("a.weight", &[3, 4]).unwrap();
            b.bias("a.bias", &[3]).unwrap();
            b.into_store().unwrap()
        };
        let (s1, s2) = (build(), build());
        assert_eq!(s1.get(ParamId(0)), s2.get(ParamId(0)));
        let mut b = ParamBuilder::shapes_only();
        b.weight("x", &[1]).unwrap();
        assert!(b.weight("x", &[1]).is_err());
        assert!(b.into_store().is_err());
    }

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut b = ParamBuilder::materialized(1);
        let id = b.weight("w", &[5000]).unwrap();
        let s = b.into_store().unwrap();
        assert!(s.get(id).max_abs() <= 2.0 * INIT_STD);
        let std = (s.get(id).data().iter().map(|v| v * v).sum::<f64>() / 5000.0).sqrt();
        assert!((0.015..0.02).contains(&std));
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut b = ParamBuilder::materialized(0);
        let id = b.weight("layer.weight", &[2, 2]).unwrap();
        let mut s = b.into_store().unwrap();
        let err = s.set(id, Tensor::zeros(&[4])).unwrap_err();
        assert!(matches!(err, Error::TensorShape { ref name, .. } if name == "layer.weight"));
    }
}
