//! Experiment configuration, read from JSON text.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branch::BranchSpec;
use crate::data::{BlobConfig, DatasetSource};
use crate::error::{Error, Result};
use crate::flops::DistributionMethod;
use crate::graph::Architecture;
use crate::pretrain::PretrainConfig;
use crate::train::TrainConfig;

/// Shape of every branch in the experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchLayout {
    /// Conv blocks per branch (the X in ConvX).
    pub blocks: usize,
    /// Number of branches.
    pub count: usize,
    /// Branch conv width; the attach point's channel count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl BranchLayout {
    pub fn specs(&self, num_classes: usize) -> Vec<BranchSpec> {
        let spec = match self.width {
            Some(w) => BranchSpec::with_width(self.blocks, w, num_classes),
            None => BranchSpec::conv(self.blocks, num_classes),
        };
        vec![spec; self.count]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub branches: BranchLayout,
    pub distribution: DistributionMethod,
    pub dataset: DatasetSource,
    /// Fraction of the loaded data used for training; the rest is validation.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub output_dir: PathBuf,
    /// Seeds branch initialization.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// The desk-scale experiment: ResNet-8 on 16x16 synthetic blobs with
    /// three narrow Conv2 branches.
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet { depth: 8 },
            num_classes: 10,
            branches: BranchLayout {
                blocks: 2,
                count: 3,
                width: Some(8),
            },
            distribution: DistributionMethod::Fine,
            dataset: DatasetSource::SyntheticBlobs(BlobConfig::new(4000, 10, 11)),
            train_fraction: 0.9,
            split_seed: 5,
            pretrain: PretrainConfig {
                seed: 1,
                ..Default::default()
            },
            train: TrainConfig {
                seed: 3,
                ..Default::default()
            },
            lambdas: vec![0.2, 0.9, 2.3],
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0],
            output_dir: PathBuf::from("out"),
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry the line and column of the
    /// offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.branches.count == 0 || self.branches.blocks == 0 {
            return bad("branches need at least one branch of at least one block".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("lambda {l} must be finite and >= 0"));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("threshold {t} outside [0, 1]"));
        }
        self.pretrain.validate().map_err(|e| Error::Config(format!("pretrain: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))
    }
}
