//! Flat key=value run configuration: dataset, model and training settings
//! in one diffable text file. Unknown keys are rejected with their line
//! number; every key has a documented default.
//!
//! ```text
//! # dataset
//! dataset.kind = synthetic          # synthetic | dir
//! dataset.train_samples = 200
//! dataset.val_samples = 50
//! dataset.points_per_cloud = 512
//! dataset.noise_sigma = 0.02
//! dataset.seed = 0
//! dataset.train_dir = <path>        # dir kind only
//! dataset.val_dir = <path>          # dir kind only
//!
//! # model (defaults shown)
//! model.in_channels = 1
//! model.layers = mpvconv:32:16,mpvconv:64:8,mlp:128,mlp:128
//! model.global_feature = true
//! model.num_classes = 2
//! model.width_multiplier = 1.0
//! model.combination_mode = G
//! model.fusion = true
//! model.one_by_one_conv = true
//! model.init_conv_depth = 2
//! model.fusion_conv_depth = 2
//! model.leaky_slope = 0.1
//!
//! # training
//! train.batch_size = 8
//! train.learning_rate = 0.001
//! train.epochs = 50
//! train.seed = 0
//! train.loss = cross_entropy
//! train.target_miou = 0.90          # optional early-stop targets
//! train.target_accuracy = 0.95
//! train.patience = 5                # optional plateau stop
//!
//! # eval / ablate
//! eval.split = val                  # val | train
//! ablate.variants = modes,fusion,one_conv,resolution,depth
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{MpvcnnConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Dir,
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_samples: usize,
    pub val_samples: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            train_samples: 200,
            val_samples: 50,
            points_per_cloud: 512,
            noise_sigma: 0.02,
            seed: 0,
            train_dir: None,
            val_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
}

pub const ABLATE_GROUPS: [&str; 5] = ["modes", "fusion", "one_conv", "resolution", "depth"];

/// Parsed run configuration with defaults applied.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: MpvcnnConfig,
    pub train: TrainConfig,
    pub eval_split: EvalSplit,
    pub ablate_variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: MpvcnnConfig::desk_scale(1, 2),
            train: TrainConfig::default(),
            eval_split: EvalSplit::Val,
            ablate_variants: ABLATE_GROUPS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set_key(key, value).map_err(|e| match e {
                Error::InvalidArgument(msg) if msg.starts_with("unknown") => Error::UnknownKey {
                    path: path.into(),
                    line: lineno,
                    key: key.to_string(),
                },
                Error::InvalidArgument(msg) => Error::Parse {
                    path: path.into(),
                    line: lineno,
                    msg,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            Error::InvalidArgument(format!("invalid value `{value}` for `{key}`: {what}"))
        };
        if let Some(model_key) = key.strip_prefix("model.") {
            return self.model.set_key(model_key, value).map_err(|e| match e {
                Error::InvalidArgument(msg) if msg.starts_with("unknown") => {
                    Error::InvalidArgument(format!("unknown config key `{key}`"))
                }
                other => other,
            });
        }
        match key {
            "dataset.kind" => {
                self.dataset.kind = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "dir" => DatasetKind::Dir,
                    _ => return Err(bad("expected `synthetic` or `dir`")),
                }
            }
            "dataset.train_samples" => {
                self.dataset.train_samples = value.parse().map_err(|_| bad("usize"))?
            }
            "dataset.val_samples" => {
                self.dataset.val_samples = value.parse().map_err(|_| bad("usize"))?
            }
            "dataset.points_per_cloud" => {
                self.dataset.points_per_cloud = value.parse().map_err(|_| bad("usize"))?
            }
            "dataset.noise_sigma" => {
                self.dataset.noise_sigma = value.parse().map_err(|_| bad("float"))?
            }
            "dataset.seed" => self.dataset.seed = value.parse().map_err(|_| bad("u64"))?,
            "dataset.train_dir" => self.dataset.train_dir = Some(PathBuf::from(value)),
            "dataset.val_dir" => self.dataset.val_dir = Some(PathBuf::from(value)),
            "train.batch_size" => {
                self.train.batch_size = value.parse().map_err(|_| bad("usize"))?
            }
            "train.learning_rate" => {
                self.train.learning_rate = value.parse().map_err(|_| bad("float"))?
            }
            "train.epochs" => self.train.epochs = value.parse().map_err(|_| bad("usize"))?,
            "train.seed" => self.train.seed = value.parse().map_err(|_| bad("u64"))?,
            "train.loss" => self.train.loss = value.parse()?,
            "train.target_miou" => {
                self.train.target_miou = Some(value.parse().map_err(|_| bad("float"))?)
            }
            "train.target_accuracy" => {
                self.train.target_accuracy = Some(value.parse().map_err(|_| bad("float"))?)
            }
            "train.patience" => {
                self.train.patience = Some(value.parse().map_err(|_| bad("usize"))?)
            }
            "eval.split" => {
                self.eval_split = match value {
                    "train" => EvalSplit::Train,
                    "val" => EvalSplit::Val,
                    _ => return Err(bad("expected `train` or `val`")),
                }
            }
            "ablate.variants" => {
                let mut groups = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if !ABLATE_GROUPS.contains(&part) {
                        return Err(bad(&format!("expected a subset of {ABLATE_GROUPS:?}")));
                    }
                    groups.push(part.to_string());
                }
                self.ablate_variants = groups;
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{key}`"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                if self.dataset.train_samples == 0 || self.dataset.val_samples == 0 {
                    return Err(Error::InvalidArgument(
                        "synthetic dataset needs train_samples >= 1 and val_samples >= 1".into(),
                    ));
                }
            }
            DatasetKind::Dir => {
                if self.dataset.train_dir.is_none() && self.dataset.val_dir.is_none() {
                    return Err(Error::InvalidArgument(
                        "dir dataset needs dataset.train_dir and/or dataset.val_dir".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
