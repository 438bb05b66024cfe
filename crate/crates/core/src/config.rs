//! Run configuration: a `key = value` text format with `#` comments.
//! Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbones::{BackboneConfig, Family, ResNetConfig, Scale};
use crate::error::{Error, Result};
use crate::graph::FeatureShape;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::config(format!("unknown dataset `{other}` (mnist or cifar10)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: String,
    pub elastic: bool,
    /// Intermediate exits to keep (1-based); `None` keeps all.
    pub keep_exits: Option<Vec<usize>>,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub per_class: Option<usize>,
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub dropout: f64,
    pub class_scaled_loss: bool,
    pub loss_weights: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub growth_rate: Option<usize>,
    pub dense_blocks: Option<Vec<usize>>,
    pub resnet_blocks: Option<Vec<usize>>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: "mini-mobilenet".into(),
            elastic: true,
            keep_exits: None,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist-sample"),
            per_class: None,
            train_fraction: 0.8,
            train: TrainConfig::default(),
            dropout: 0.2,
            class_scaled_loss: true,
            loss_weights: None,
            alpha: None,
            rho: None,
            growth_rate: None,
            dense_blocks: None,
            resnet_blocks: None,
            out: PathBuf::from("runs/latest"),
        }
    }
}

/// Every key the config file and `set` accept.
pub const KEYS: &[&str] = &[
    "backbone",
    "elastic",
    "keep_exits",
    "dataset",
    "data_dir",
    "per_class",
    "train_fraction",
    "epochs1",
    "epochs2",
    "lr",
    "momentum",
    "batch",
    "patience",
    "factor",
    "min_delta",
    "seed",
    "dropout",
    "class_scaled_loss",
    "loss_weights",
    "alpha",
    "rho",
    "growth_rate",
    "dense_blocks",
    "resnet_blocks",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "backbone" => self.backbone = value.to_string(),
            "elastic" => self.elastic = parse_bool(key, value)?,
            "keep_exits" => self.keep_exits = Some(parse_list(key, value)?),
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "per_class" => self.per_class = Some(parse(key, value)?),
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "epochs1" => t.phase1_epochs = parse(key, value)?,
            "epochs2" => t.phase2_epochs = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "batch" => t.batch_size = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "factor" => t.factor = parse(key, value)?,
            "min_delta" => t.min_delta = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "class_scaled_loss" => self.class_scaled_loss = parse_bool(key, value)?,
            "loss_weights" => self.loss_weights = Some(parse_list(key, value)?),
            "alpha" => self.alpha = Some(parse(key, value)?),
            "rho" => self.rho = Some(parse(key, value)?),
            "growth_rate" => self.growth_rate = Some(parse(key, value)?),
            "dense_blocks" => self.dense_blocks = Some(parse_list(key, value)?),
            "resnet_blocks" => self.resnet_blocks = Some(parse_list(key, value)?),
            "out" => self.out = PathBuf::from(value),
            other => {
                return Err(Error::config(format!(
                    "unknown key `{other}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// The backbone preset with any architecture overrides applied.
    pub fn backbone_config(&self, input: FeatureShape) -> Result<BackboneConfig> {
        let mut cfg = BackboneConfig::preset(&self.backbone, input)?;
        if cfg.scale == Scale::FullAudit {
            return Err(Error::config(format!(
                "`{}` is shape-only and cannot be trained; use a mini backbone",
                self.backbone
            )));
        }
        let mismatch = |key: &str| {
            Error::config(format!("`{key}` does not apply to backbone {}", self.backbone))
        };
        match &mut cfg.family {
            Family::MobileNet(m) => {
                if let Some(a) = self.alpha {
                    m.alpha = a;
                }
                if let Some(r) = self.rho {
                    m.rho = r;
                }
            }
            Family::DenseNet(d) => {
                if let Some(k) = self.growth_rate {
                    d.growth_rate = k;
                }
                if let Some(b) = &self.dense_blocks {
                    d.blocks = b.clone();
                }
            }
            Family::ResNet(r) => {
                if let Some(b) = &self.resnet_blocks {
                    *r = ResNetConfig::with_layout(b);
                }
            }
            Family::Vgg(_) => {}
        }
        let is = |f: fn(&Family) -> bool| f(&cfg.family);
        if (self.alpha.is_some() || self.rho.is_some()) && !is(|f| matches!(f, Family::MobileNet(_))) {
            return Err(mismatch("alpha/rho"));
        }
        if (self.growth_rate.is_some() || self.dense_blocks.is_some()) && !is(|f| matches!(f, Family::DenseNet(_))) {
            return Err(mismatch("growth_rate/dense_blocks"));
        }
        if self.resnet_blocks.is_some() && !is(|f| matches!(f, Family::ResNet(_))) {
            return Err(mismatch("resnet_blocks"));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.train.phase1_epochs, 10);
        assert_eq!(c.train.phase2_epochs, 100);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.train.factor, 10.0);
        assert_eq!(c.train_fraction, 0.8);
    }

    #[test]
    fn parses_text_and_rejects_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nbackbone = mini-densenet\nepochs2 = 3 # inline\nkeep_exits = 2, 6\n")
            .unwrap();
        assert_eq!(c.backbone, "mini-densenet");
        assert_eq!(c.train.phase2_epochs, 3);
        assert_eq!(c.keep_exits, Some(vec![2, 6]));
        let err = c.apply_text("learning_rate = 1").unwrap_err().to_string();
        assert!(err.contains("unknown key") && err.contains("line 1"), "{err}");
        assert!(c.set("lr", "fast").is_err());
    }

    #[test]
    fn architecture_overrides() {
        let mut c = RunConfig::default();
        c.set("alpha", "0.25").unwrap();
        let b = c.backbone_config(FeatureShape::new(28, 28, 1)).unwrap();
        assert!(matches!(b.family, Family::MobileNet(ref m) if m.alpha == 0.25));
        c.set("backbone", "mini-vgg").unwrap();
        assert!(c.backbone_config(FeatureShape::new(28, 28, 1)).is_err());
        c.set("backbone", "densenet-169").unwrap();
        assert!(c.backbone_config(FeatureShape::new(28, 28, 1)).is_err());
    }
}
