//! Run configuration as a strict TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub cifar_dir: Option<PathBuf>,
    /// Explicit file lists; take precedence over `cifar_dir`.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// Keep only the first N training / test items.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            cifar_dir: None,
            train_files: Vec::new(),
            test_files: Vec::new(),
            train_limit: None,
            test_limit: None,
            synthetic_train: 64,
            synthetic_test: 0,
            synthetic_classes: 8,
            normalization: Normalization::default(),
        }
    }
}

impl DataConfig {
    fn files(&self) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        if !self.train_files.is_empty() {
            return Ok((self.train_files.clone(), self.test_files.clone()));
        }
        let dir = self
            .cifar_dir
            .as_ref()
            .ok_or_else(|| Error::config("cifar10 data needs `cifar_dir` or `train_files` in [data]"))?;
        let train = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
        Ok((train, vec![dir.join("test_batch.bin")]))
    }

    /// Training set and optional test set.
    pub fn load(&self, side: usize, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        let limit = |d: Dataset, n: Option<usize>| match n {
            Some(n) => d.take(n),
            None => d,
        };
        match self.source {
            DataSource::Synthetic => {
                let total = self.synthetic_train + self.synthetic_test;
                let all = data::synthetic_dataset(total, self.synthetic_classes, side, seed)?;
                let train = limit(all.take(self.synthetic_train), self.train_limit);
                let test = (self.synthetic_test > 0).then(|| {
                    let n = all.image_len();
                    Dataset {
                        images: all.images[self.synthetic_train * n..].to_vec(),
                        labels: all.labels[self.synthetic_train..].to_vec(),
                        ..all.clone()
                    }
                });
                Ok((train, test.map(|t| limit(t, self.test_limit))))
            }
            DataSource::Cifar10 => {
                if side != data::CIFAR_SIDE {
                    return Err(Error::config(format!(
                        "CIFAR-10 images are {s}x{s}; set model.image_size = {s}",
                        s = data::CIFAR_SIDE
                    )));
                }
                let (train_files, test_files) = self.files()?;
                let train = data::load_cifar10_bin(&train_files, &self.normalization)?;
                let test = if test_files.is_empty() {
                    None
                } else {
                    Some(limit(data::load_cifar10_bin(&test_files, &self.normalization)?, self.test_limit))
                };
                Ok((limit(train, self.train_limit), test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub eval_batch_size: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            eval_batch_size: 256,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.schedule.validate()?;
        self.data.normalization.validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size must be positive"));
        }
        Ok(())
    }

    /// Writes the effective configuration as `config.toml` in the run directory.
    pub fn write_effective(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.run_dir)?;
        let path = self.run_dir.join("config.toml");
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
