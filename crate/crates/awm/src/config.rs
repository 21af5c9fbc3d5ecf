//! Experiment configuration as a plain `key = value` text file.
//!
//! Every run writes its fully resolved configuration next to its outputs,
//! so the file plus the dataset checksums reproduce the run. Lines are
//! `key = value`; blank lines and `#` comments are ignored; unknown keys
//! are rejected. `serialize` then `parse` is an exact round trip.

use std::path::PathBuf;

use crate::data::CifarVariant;
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, NetworkKind};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset: CifarVariant,
    pub data_dir: Option<PathBuf>,
    /// Class-balanced training subset; 0 uses the full split.
    pub subset_per_class: usize,
    pub subset_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkConfig::new(NetworkKind::ResnetAwm, 20, 10),
            train: TrainConfig::default(),
            dataset: CifarVariant::C10,
            data_dir: None,
            subset_per_class: 0,
            subset_seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.network.num_classes != self.dataset.num_classes() {
            return Err(Error::invalid(format!(
                "network has {} classes but dataset has {}",
                self.network.num_classes,
                self.dataset.num_classes()
            )));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("arch", self.network.kind.as_str().to_string());
        put("depth", self.network.depth.to_string());
        put("num_classes", self.network.num_classes.to_string());
        put("base_channels", self.network.base_channels.to_string());
        put("growth_rate", self.network.growth_rate.to_string());
        put("reduction", self.network.reduction.to_string());
        put("projection_shortcut", self.network.projection_shortcut.to_string());
        put("epochs", self.train.epochs.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put("lr0", format_f64(self.train.lr0));
        put("lr_factor", format_f64(self.train.lr_factor));
        put(
            "lr_milestones",
            self.train
                .lr_milestones
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("momentum", format_f64(self.train.momentum));
        put("weight_decay", format_f64(self.train.weight_decay));
        put("t", self.train.alternation.to_string());
        put("seed", self.train.seed.to_string());
        put("augment", self.train.augment.to_string());
        put("eval_limit", self.train.eval_limit.to_string());
        put(
            "dataset",
            match self.dataset {
                CifarVariant::C10 => "cifar10".to_string(),
                CifarVariant::C100 => "cifar100".to_string(),
            },
        );
        put(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("subset_per_class", self.subset_per_class.to_string());
        put("subset_seed", self.subset_seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::invalid(format!("config line {}: bad {what} value '{value}'", lineno + 1))
            };
            match key {
                "arch" => cfg.network.kind = NetworkKind::parse(value)?,
                "depth" => cfg.network.depth = value.parse().map_err(|_| bad("depth"))?,
                "num_classes" => {
                    cfg.network.num_classes = value.parse().map_err(|_| bad("num_classes"))?
                }
                "base_channels" => {
                    cfg.network.base_channels = value.parse().map_err(|_| bad("base_channels"))?
                }
                "growth_rate" => {
                    cfg.network.growth_rate = value.parse().map_err(|_| bad("growth_rate"))?
                }
                "reduction" => cfg.network.reduction = value.parse().map_err(|_| bad("reduction"))?,
                "projection_shortcut" => {
                    cfg.network.projection_shortcut =
                        value.parse().map_err(|_| bad("projection_shortcut"))?
                }
                "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "lr0" => cfg.train.lr0 = value.parse().map_err(|_| bad("lr0"))?,
                "lr_factor" => cfg.train.lr_factor = value.parse().map_err(|_| bad("lr_factor"))?,
                "lr_milestones" => {
                    cfg.train.lr_milestones = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|m| m.trim().parse().map_err(|_| bad("lr_milestones")))
                            .collect::<Result<Vec<_>>>()?
                    }
                }
                "momentum" => cfg.train.momentum = value.parse().map_err(|_| bad("momentum"))?,
                "weight_decay" => {
                    cfg.train.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
                }
                "t" => cfg.train.alternation = value.parse().map_err(|_| bad("t"))?,
                "seed" => cfg.train.seed = value.parse().map_err(|_| bad("seed"))?,
                "augment" => cfg.train.augment = value.parse().map_err(|_| bad("augment"))?,
                "eval_limit" => cfg.train.eval_limit = value.parse().map_err(|_| bad("eval_limit"))?,
                "dataset" => cfg.dataset = CifarVariant::parse(value)?,
                "data_dir" => {
                    cfg.data_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
                }
                "subset_per_class" => {
                    cfg.subset_per_class = value.parse().map_err(|_| bad("subset_per_class"))?
                }
                "subset_seed" => cfg.subset_seed = value.parse().map_err(|_| bad("subset_seed"))?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(Error::invalid(format!(
                        "config line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }
}

/// f64 formatting that parses back to the identical value.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}
