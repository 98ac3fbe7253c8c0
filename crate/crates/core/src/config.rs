//! Experiment configuration: a TOML file, dotted-key overrides and the
//! `FDN_SEED` environment override.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{read_dataset, synth_generate, EmbeddingDataset, SynthConfig, Task};
use crate::error::{Error, Result};
use crate::eval::RunSpec;
use crate::model::ModelConfig;
use crate::trainer::{Ablations, TrainConfig};

pub const SEED_ENV: &str = "FDN_SEED";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub shots: usize,
    /// Seeds for multi-seed runs and sweeps.
    pub seeds: Vec<u64>,
    pub eval_batch: usize,
    /// Retention values for `sweep-k`.
    pub k_list: Vec<usize>,
    /// Dataset file; the synthetic generator is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablations: Ablations,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::B2n,
            shots: 16,
            seeds: vec![0, 1, 2],
            eval_batch: 1,
            k_list: vec![8, 16, 32, 48, 64, 96, 128],
            data: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig { epochs: 30, ..TrainConfig::default() },
            ablations: Ablations::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p:?} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// A single seed from the environment replaces both the training seed and
    /// the seed list.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let s: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.train.seed = s;
            self.seeds = vec![s];
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.eval_batch == 0 {
            return Err(Error::Config("shots and eval_batch must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn dataset(&self) -> Result<EmbeddingDataset> {
        match &self.data {
            Some(p) => read_dataset(p),
            None => synth_generate(&self.synth),
        }
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            task: self.task,
            shots: self.shots,
            model: self.model.clone(),
            train: self.train.clone(),
            ablations: self.ablations,
            eval_batch: self.eval_batch,
            config_hash: self.hash(),
        }
    }
}
