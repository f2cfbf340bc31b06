//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `classes` | number of classes K | 10 |
//! | `input_dim` | raw input width D | 32 |
//! | `n_max` | head-class training count | 500 |
//! | `ratio` | imbalance ratio | 100 |
//! | `class_sep` | radius of the class means | 3.0 |
//! | `noise_sigma` | per-coordinate noise std | 1.0 |
//! | `test_per_class` | balanced test count per class | 100 |
//! | `data_seed` | dataset seed, defaults to `seed` | |
//! | `hidden_dim` | backbone hidden width | 64 |
//! | `feature_dim` | feature width C | 16 |
//! | `heads` | attention heads | 4 |
//! | `encoder_layers` | encoder depth | 1 |
//! | `dropout` | encoder dropout | 0.5 |
//! | `shared_classifier` | `on`/`off` | on |
//! | `epochs` | training epochs | 30 |
//! | `batch_size` | training batch size | 64 |
//! | `base_lr` | learning rate | 0.05 |
//! | `bf_lr_mult` | encoder lr multiplier | 0.1 |
//! | `momentum` | SGD momentum | 0.9 |
//! | `weight_decay` | L2 coefficient | 5e-4 |
//! | `lr_schedule` | `constant`, `step` or `cosine` | step |
//! | `lr_milestones` | comma list of epochs for `step` | 24 |
//! | `lr_gamma` | decay factor for `step` | 0.1 |
//! | `loss` | `ce` or `balanced` | balanced |
//! | `batchformer` | `on`/`off` | on |
//! | `seed` | run seed | 0 |
//! | `eval_batch_size` | evaluation chunk size | 256 |
//! | `group_rule` | `tertile` or `absolute:HI:LO` | tertile |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batchformer::ModelConfig;
use crate::data::DatasetSpec;
use crate::error::{LabError, Result};
use crate::loss::LossKind;
use crate::metrics::GroupRule;
use crate::train::{ScheduleKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub data: DatasetSpec,
    /// Pinned dataset seed. `None` ties the dataset to the run seed.
    pub data_seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub group_rule: GroupRule,
}

impl Default for LabConfig {
    fn default() -> Self {
        let mut c = Self {
            data: DatasetSpec::default(),
            data_seed: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            group_rule: GroupRule::Tertile,
        };
        c.sync_model();
        c
    }
}

pub const KEYS: &[&str] = &[
    "classes",
    "input_dim",
    "n_max",
    "ratio",
    "class_sep",
    "noise_sigma",
    "test_per_class",
    "data_seed",
    "hidden_dim",
    "feature_dim",
    "heads",
    "encoder_layers",
    "dropout",
    "shared_classifier",
    "epochs",
    "batch_size",
    "base_lr",
    "bf_lr_mult",
    "momentum",
    "weight_decay",
    "lr_schedule",
    "lr_milestones",
    "lr_gamma",
    "loss",
    "batchformer",
    "seed",
    "eval_batch_size",
    "group_rule",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LabError::config(format!("bad value for {key}: {value:?}")))
}

pub fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(LabError::config(format!(
            "{key} expects on/off, got {value:?}"
        ))),
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl LabConfig {
    /// Copies fields that several sections share from their owning section.
    pub fn sync_model(&mut self) {
        self.model.input_dim = self.data.input_dim;
        self.model.classes = self.data.classes;
        self.model.encoder_layers = self.train.encoder_layers;
        self.data.seed = self.data_seed.unwrap_or(self.train.seed);
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sync_model();
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.classes != self.data.classes
            || self.model.input_dim != self.data.input_dim
            || self.model.encoder_layers != self.train.encoder_layers
        {
            return Err(LabError::config(
                "model section out of sync with data/train",
            ));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "classes" => self.data.classes = num(key, value)?,
            "input_dim" => self.data.input_dim = num(key, value)?,
            "n_max" => self.data.n_max = num(key, value)?,
            "ratio" => self.data.ratio = num(key, value)?,
            "class_sep" => self.data.class_sep = num(key, value)?,
            "noise_sigma" => self.data.noise_sigma = num(key, value)?,
            "test_per_class" => self.data.test_per_class = num(key, value)?,
            "data_seed" => self.data_seed = Some(num(key, value)?),
            "hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "feature_dim" => self.model.feature_dim = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "encoder_layers" => self.train.encoder_layers = num(key, value)?,
            "dropout" => self.model.dropout = num(key, value)?,
            "shared_classifier" => self.model.shared_classifier = parse_switch(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "base_lr" => self.train.base_lr = num(key, value)?,
            "bf_lr_mult" => self.train.bf_lr_mult = num(key, value)?,
            "momentum" => self.train.momentum = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "lr_schedule" => {
                self.train.lr_schedule = match value {
                    "constant" => ScheduleKind::Constant,
                    "step" => ScheduleKind::Step,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(LabError::config(format!("unknown lr_schedule {value:?}"))),
                }
            }
            "lr_milestones" => {
                self.train.lr_milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_gamma" => self.train.lr_gamma = num(key, value)?,
            "loss" => {
                self.train.loss = match value {
                    "ce" => LossKind::CrossEntropy,
                    "balanced" => LossKind::BalancedSoftmax,
                    _ => return Err(LabError::config(format!("unknown loss {value:?}"))),
                }
            }
            "batchformer" => self.train.batchformer = parse_switch(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "eval_batch_size" => self.train.eval_batch_size = num(key, value)?,
            "group_rule" => self.group_rule = value.parse()?,
            _ => return Err(LabError::config(format!("unknown config key {key:?}"))),
        }
        self.sync_model();
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                LabError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            c.apply(k.trim(), v).map_err(|e| match e {
                LabError::Config(m) => LabError::config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text that [`LabConfig::parse`] reads back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("classes", d.classes.to_string());
        put("input_dim", d.input_dim.to_string());
        put("n_max", d.n_max.to_string());
        put("ratio", format!("{:?}", d.ratio));
        put("class_sep", format!("{:?}", d.class_sep));
        put("noise_sigma", format!("{:?}", d.noise_sigma));
        put("test_per_class", d.test_per_class.to_string());
        if let Some(ds) = self.data_seed {
            put("data_seed", ds.to_string());
        }
        put("hidden_dim", m.hidden_dim.to_string());
        put("feature_dim", m.feature_dim.to_string());
        put("heads", m.heads.to_string());
        put("encoder_layers", t.encoder_layers.to_string());
        put("dropout", format!("{:?}", m.dropout));
        put("shared_classifier", switch(m.shared_classifier).into());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("base_lr", format!("{:?}", t.base_lr));
        put("bf_lr_mult", format!("{:?}", t.bf_lr_mult));
        put("momentum", format!("{:?}", t.momentum));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put(
            "lr_schedule",
            match t.lr_schedule {
                ScheduleKind::Constant => "constant",
                ScheduleKind::Step => "step",
                ScheduleKind::Cosine => "cosine",
            }
            .into(),
        );
        let ms: Vec<String> = t.lr_milestones.iter().map(usize::to_string).collect();
        put("lr_milestones", ms.join(","));
        put("lr_gamma", format!("{:?}", t.lr_gamma));
        put(
            "loss",
            match t.loss {
                LossKind::CrossEntropy => "ce",
                LossKind::BalancedSoftmax => "balanced",
            }
            .into(),
        );
        put("batchformer", switch(t.batchformer).into());
        put("seed", t.seed.to_string());
        put("eval_batch_size", t.eval_batch_size.to_string());
        put("group_rule", self.group_rule.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let c = LabConfig::default();
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.base_lr, 0.05);
        assert_eq!(c.train.lr_milestones, vec![24]);
        assert_eq!(c.data.ratio, 100.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_comments_and_keys() {
        let c = LabConfig::parse(
            "# toy\n\nclasses = 5\nlr_gamma=0.5\nlr_schedule = cosine\nbatchformer = off\nseed = 7\ngroup_rule = absolute:100:20\n",
        )
        .unwrap();
        assert_eq!(c.data.classes, 5);
        assert_eq!(c.model.classes, 5);
        assert_eq!(c.train.lr_gamma, 0.5);
        assert_eq!(c.train.lr_schedule, ScheduleKind::Cosine);
        assert!(!c.train.batchformer);
        assert_eq!(c.data.seed, 7);
        assert_eq!(
            c.group_rule,
            GroupRule::Absolute {
                many_above: 100,
                few_below: 20
            }
        );
    }

    #[test]
    fn data_seed_pins_dataset() {
        let a = LabConfig::parse("data_seed = 3\nseed = 9").unwrap();
        let b = LabConfig::parse("seed = 9\ndata_seed = 3").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data.seed, 3);
        let mut c = a.clone();
        c.set_seed(11);
        assert_eq!(c.data.seed, 3);
    }

    #[test]
    fn errors_name_the_line() {
        let e = LabConfig::parse("classes = 4\nbogus = 1").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(LabConfig::parse("no equals sign").is_err());
        assert!(LabConfig::parse("loss = focal").is_err());
        assert!(LabConfig::parse("epochs = -1").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = LabConfig::parse(
            "ratio = 12.5\nlr_milestones = 3, 7\ndata_seed = 2\nbf_lr_mult = 0.25",
        )
        .unwrap();
        c.set_seed(4);
        assert_eq!(LabConfig::parse(&c.to_kv_string()).unwrap(), c);
        let d = LabConfig::default();
        assert_eq!(LabConfig::parse(&d.to_kv_string()).unwrap(), d);
    }

    #[test]
    fn every_key_is_accepted() {
        let text = LabConfig::default().to_kv_string();
        let written: Vec<&str> = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, _)| k)
            .collect();
        for k in KEYS {
            assert!(written.contains(k) || *k == "data_seed", "{k}");
        }
        assert!(LabConfig::parse("data_seed = 1").is_ok());
    }
}
