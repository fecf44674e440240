//! `key = value` run configuration covering the model and training knobs.
//!
//! Unknown keys, duplicate keys and malformed values are rejected with the
//! offending line. The seed is deliberately absent: it always comes from the
//! command line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kinet_unit::Ablation;
use crate::network::{ModelConfig, Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "reduce_ratio",
    "group_dim",
    "dt",
    "dr",
    "out_dim",
    "k_max",
    "n_classes",
    "ablation",
    "epochs_static",
    "epochs_temporal",
    "lr",
    "batch_size",
    "optimizer",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value {raw:?} for {key}"),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, val) = l.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, found {l:?}"),
            })?;
            let (key, val) = (key.trim(), val.trim());
            if seen.contains(&key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            let k = &mut cfg.model.kinet;
            let t = &mut cfg.train;
            match key {
                "reduce_ratio" => k.reduce_ratio = value(line, key, val)?,
                "group_dim" => k.group_dim = value(line, key, val)?,
                "dt" => k.dt = value(line, key, val)?,
                "dr" => k.dr = value(line, key, val)?,
                "out_dim" => k.out_dim = value(line, key, val)?,
                "k_max" => k.k_max = value(line, key, val)?,
                "n_classes" => cfg.model.n_classes = value(line, key, val)?,
                "ablation" => cfg.model.ablation = value::<Ablation>(line, key, val)?,
                "epochs_static" => t.epochs_static = value(line, key, val)?,
                "epochs_temporal" => t.epochs_temporal = value(line, key, val)?,
                "lr" => t.lr = value(line, key, val)?,
                "batch_size" => t.batch_size = value(line, key, val)?,
                "optimizer" => t.optimizer = value::<Optimizer>(line, key, val)?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
            seen.push(KEYS.iter().copied().find(|&k| k == key).expect("matched above"));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let k = &self.model.kinet;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "reduce_ratio = {}", k.reduce_ratio);
        let _ = writeln!(s, "group_dim = {}", k.group_dim);
        let _ = writeln!(s, "dt = {}", k.dt);
        let _ = writeln!(s, "dr = {}", k.dr);
        let _ = writeln!(s, "out_dim = {}", k.out_dim);
        let _ = writeln!(s, "k_max = {}", k.k_max);
        let _ = writeln!(s, "n_classes = {}", self.model.n_classes);
        let _ = writeln!(s, "ablation = {}", self.model.ablation);
        let _ = writeln!(s, "epochs_static = {}", t.epochs_static);
        let _ = writeln!(s, "epochs_temporal = {}", t.epochs_temporal);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "optimizer = {}", t.optimizer);
        s
    }
}
