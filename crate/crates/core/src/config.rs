//! Flat `key = value` run configuration.
//!
//! Values are resolved with the precedence command line > file > default.
//! The resolved form lists every key in sorted order, so it can be diffed
//! and parsed back to the same configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::futuresup::FsReduction;
use crate::optim::AdamConfig;
use crate::trainer::{TrainConfig, ValidMetric};

pub const LAMBDA_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
pub const HORIZON_GRID: [usize; 4] = [2, 3, 4, 5];
pub const TAU_GRID: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub run_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub train: TrainConfig,
    pub allow_offgrid: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::new(0);
        RunConfig {
            data: PathBuf::from("data/corpus.txt"),
            run_dir: PathBuf::from("runs/default"),
            seeds: vec![42],
            dim: b.dim,
            layers: b.layers,
            heads: b.heads,
            max_len: b.max_len,
            dropout: b.dropout,
            train: TrainConfig::default(),
            allow_offgrid: false,
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "allow_offgrid",
    "batch_size",
    "beta1",
    "beta2",
    "clip_norm",
    "data",
    "dim",
    "dropout",
    "eps",
    "fc_temperature",
    "fs_reduction",
    "heads",
    "horizon",
    "lambda",
    "layers",
    "lr",
    "max_epochs",
    "max_len",
    "patience",
    "run_dir",
    "seeds",
    "tau",
    "use_fc",
    "use_fs",
    "use_ug",
    "valid_metric",
];

/// Parses `key = value` lines. `#` starts a comment.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            source_name: source.to_string(),
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn on_grid<T: PartialEq + Copy>(grid: &[T], v: T) -> bool {
    grid.contains(&v)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "allow_offgrid" => self.allow_offgrid = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "beta1" => t.adam.beta1 = parse_value(key, value)?,
            "beta2" => t.adam.beta2 = parse_value(key, value)?,
            "clip_norm" => {
                t.clip_norm = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "data" => self.data = PathBuf::from(value),
            "dim" => self.dim = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "eps" => t.adam.eps = parse_value(key, value)?,
            "fc_temperature" => t.fc_temperature = parse_value(key, value)?,
            "fs_reduction" => {
                t.fs_reduction = FsReduction::parse(value)
                    .ok_or_else(|| Error::Config(format!("invalid value `{value}` for `fs_reduction`")))?
            }
            "heads" => self.heads = parse_value(key, value)?,
            "horizon" => t.horizon = parse_value(key, value)?,
            "lambda" => t.lambda = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "max_epochs" => t.max_epochs = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "patience" => t.patience = parse_value(key, value)?,
            "run_dir" => self.run_dir = PathBuf::from(value),
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_value::<u64>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "tau" => t.tau = parse_value(key, value)?,
            "use_fc" => t.use_fc = parse_value(key, value)?,
            "use_fs" => t.use_fs = parse_value(key, value)?,
            "use_ug" => t.use_ug = parse_value(key, value)?,
            "valid_metric" => {
                t.valid_metric = ValidMetric::parse(value)
                    .ok_or_else(|| Error::Config(format!("invalid value `{value}` for `valid_metric`")))?
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults, then `file` pairs, then `overrides`.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut seen = std::collections::HashSet::new();
        for (k, _) in file {
            if !seen.insert(k.as_str()) {
                return Err(Error::Config(format!("duplicate config key `{k}`")));
            }
        }
        let mut c = RunConfig::default();
        for (k, v) in file.iter().chain(overrides) {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str, source: &str) -> Result<RunConfig> {
        RunConfig::resolve(&parse_pairs(text, source)?, &[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.backbone(1).validate()?;
        self.train.validate()?;
        if !self.allow_offgrid {
            let t = &self.train;
            if !on_grid(&LAMBDA_GRID, t.lambda) {
                return Err(Error::Config(format!(
                    "lambda {} is off the grid {LAMBDA_GRID:?}; set allow_offgrid = true to use it",
                    t.lambda
                )));
            }
            if !on_grid(&HORIZON_GRID, t.horizon) {
                return Err(Error::Config(format!(
                    "horizon {} is off the grid {HORIZON_GRID:?}; set allow_offgrid = true to use it",
                    t.horizon
                )));
            }
            if !on_grid(&TAU_GRID, t.tau) {
                return Err(Error::Config(format!(
                    "tau {} is off the grid {TAU_GRID:?}; set allow_offgrid = true to use it",
                    t.tau
                )));
            }
        }
        Ok(())
    }

    pub fn backbone(&self, num_items: usize) -> BackboneConfig {
        BackboneConfig {
            num_items,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    /// Training config for the given seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let AdamConfig { beta1, beta2, eps, .. } = t.adam;
        let seeds: Vec<String> = self.seeds.iter().map(ToString::to_string).collect();
        let entries: [(&'static str, String); 26] = [
            ("allow_offgrid", self.allow_offgrid.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("beta1", format!("{beta1:?}")),
            ("beta2", format!("{beta2:?}")),
            ("clip_norm", t.clip_norm.map_or("none".into(), |v| format!("{v:?}"))),
            ("data", self.data.display().to_string()),
            ("dim", self.dim.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("eps", format!("{eps:?}")),
            ("fc_temperature", format!("{:?}", t.fc_temperature)),
            ("fs_reduction", t.fs_reduction.as_str().into()),
            ("heads", self.heads.to_string()),
            ("horizon", t.horizon.to_string()),
            ("lambda", format!("{:?}", t.lambda)),
            ("layers", self.layers.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("max_epochs", t.max_epochs.to_string()),
            ("max_len", self.max_len.to_string()),
            ("patience", t.patience.to_string()),
            ("run_dir", self.run_dir.display().to_string()),
            ("seeds", seeds.join(",")),
            ("tau", format!("{:?}", t.tau)),
            ("use_fc", t.use_fc.to_string()),
            ("use_fs", t.use_fs.to_string()),
            ("use_ug", t.use_ug.to_string()),
            ("valid_metric", t.valid_metric.as_str().into()),
        ];
        entries.into_iter().collect()
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn to_resolved_string(&self) -> String {
        self.to_map().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
