//! Flat `key = value` run configuration.
//!
//! The first non-comment line must be `schema = 1`. Unknown keys are
//! rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use wordlearn::decodertrain::DecoderConfig;
use wordlearn::embedpack::SyntheticConfig;
use wordlearn::evalsuite::BaselineConfig;
use wordlearn::trainer::TrainConfig;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "WORDLEARN_OUT_DIR";

const KEYS: &[&str] = &[
    "schema",
    "pack",
    "store",
    "out_dir",
    "new_pack",
    "seed",
    "threads",
    "labels",
    "holdout_every",
    // trainer
    "batch_size",
    "loss_threshold",
    "max_rounds",
    "epochs",
    "learning_rate",
    // decoders
    "decoder_batch_size",
    "decoder_rounds",
    "decoder_epochs",
    "dropout",
    // evaluation
    "mc_runs",
    "mc_items",
    "edit_pairs",
    "baseline_epochs",
    // synthetic data
    "dim",
    "dims_per_category",
    "noise_sigma",
    "variation_sigma",
    "train_count",
    "test_nc_count",
    "test_v_count",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut saw_schema = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !saw_schema {
                if k != "schema" {
                    return Err(CliError::Config("first setting must be `schema`".into()));
                }
                saw_schema = true;
            }
            if cfg.values.contains_key(k) {
                return Err(CliError::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        if !saw_schema {
            return Err(CliError::Config("missing `schema` line".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key {key}")));
        }
        if key == "schema" {
            let v: u32 = value
                .parse()
                .map_err(|_| CliError::Config(format!("schema must be an integer, got {value}")))?;
            if v != SCHEMA_VERSION {
                return Err(CliError::Config(format!(
                    "unsupported schema {v} (expected {SCHEMA_VERSION})"
                )));
            }
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {p}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("bad value for {key} ({v}): {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config(format!("missing setting {key}")))
    }

    /// Training commands refuse to pick a seed on the user's behalf.
    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")?
            .ok_or_else(|| CliError::Config("seed is required (set `seed` or pass --seed)".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.raw("out_dir").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn labels(&self) -> Option<Vec<String>> {
        self.raw("labels").map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
    }

    pub fn holdout_every(&self) -> Result<usize, CliError> {
        self.or("holdout_every", 10)
    }

    pub fn threads(&self) -> Result<usize, CliError> {
        self.or("threads", 1)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            batch_size: self.or("batch_size", d.batch_size)?,
            loss_threshold: self.or("loss_threshold", d.loss_threshold)?,
            max_rounds: self.or("max_rounds", d.max_rounds)?,
            epochs: self.or("epochs", d.epochs)?,
            learning_rate: self.or("learning_rate", d.learning_rate)?,
            seed: self.seed()?,
            threads: self.threads()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn decoder(&self) -> Result<DecoderConfig, CliError> {
        let d = DecoderConfig::default();
        let c = DecoderConfig {
            batch_size: self.or("decoder_batch_size", d.batch_size)?,
            rounds: self.or("decoder_rounds", d.rounds)?,
            epochs: self.or("decoder_epochs", d.epochs)?,
            dropout: self.or("dropout", d.dropout)?,
            learning_rate: self.or("learning_rate", d.learning_rate)?,
            seed: self.seed()?,
            threads: self.threads()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn baseline(&self) -> Result<BaselineConfig, CliError> {
        let d = BaselineConfig::default();
        Ok(BaselineConfig {
            epochs: self.or("baseline_epochs", d.epochs)?,
            batch_size: self.or("batch_size", d.batch_size)?,
            learning_rate: self.or("learning_rate", d.learning_rate)?,
            seed: self.seed()?,
            ..d
        })
    }

    pub fn mc(&self) -> Result<(usize, usize), CliError> {
        Ok((self.or("mc_runs", 15)?, self.or("mc_items", 100)?))
    }

    pub fn edit_pairs(&self) -> Result<usize, CliError> {
        self.or("edit_pairs", 300)
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig, CliError> {
        let d = SyntheticConfig::default();
        Ok(SyntheticConfig {
            dim: self.or("dim", d.dim)?,
            dims_per_category: self.or("dims_per_category", d.dims_per_category)?,
            noise_sigma: self.or("noise_sigma", d.noise_sigma)?,
            variation_sigma: self.or("variation_sigma", d.variation_sigma)?,
            train_count: self.or("train_count", d.train_count)?,
            test_nc_count: self.or("test_nc_count", d.test_nc_count)?,
            test_v_count: self.or("test_v_count", d.test_v_count)?,
            seed: self.seed()?,
            ..d
        })
    }

    /// Canonical text form; its hash identifies the configuration.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| k.as_str() != "out_dir")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
