//! JSON run configuration. Every field is optional; unknown keys are errors.
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GenParams, Split};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 500,
            val: 100,
            test: 100,
        }
    }
}

impl SplitCounts {
    pub fn as_array(&self) -> [usize; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Dataset identity; independent of the training seed.
    pub seed: u64,
    pub counts: SplitCounts,
    pub generator: GenParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            seed: 0,
            counts: SplitCounts::default(),
            generator: GenParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tiles per side of the superpixel grid.
    pub grid: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialisation and training streams.
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Parse, resolve relative paths and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.data.dir.is_relative() {
            self.data.dir = base.join(&self.data.dir);
        }
        if self.out_dir.as_os_str().is_empty() {
            self.out_dir = PathBuf::from("run");
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.arch.input_size != self.data.generator.size {
            return Err(Error::Config(format!(
                "arch.input_size {} differs from data.generator.size {}",
                self.arch.input_size, self.data.generator.size
            )));
        }
        if self.arch.classes != crate::data::CLASSES {
            return Err(Error::Config("the synthetic task has exactly 2 classes".into()));
        }
        if self.eval.grid == 0 || self.eval.grid > self.arch.input_size {
            return Err(Error::Config("eval.grid must be in [1, input_size]".into()));
        }
        Ok(())
    }
}
