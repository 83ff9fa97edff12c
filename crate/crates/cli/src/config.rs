//! Layered configuration: built-in defaults, then a TOML file, then
//! `QRAUG_SECTION__KEY` environment variables, then command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use qraug::augmenter::AugmentConfig;
use qraug::corpus::SyntheticConfig;
use qraug::pipeline::ExperimentConfig;
use qraug::rewards::EncoderConfig;
use qraug::scst::ScstConfig;
use qraug::seq2seq::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "QRAUG_";
const ENV_SEPARATOR: &str = "__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub n: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { seed: 0, n: 10_000, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub min_count: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub ks: Vec<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { ks: vec![1, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub vocab: VocabSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub scst: ScstConfig,
    pub augment: AugmentConfig,
    pub retrieval: RetrievalSection,
    pub experiment: ExperimentConfig,
}

/// Raw key-value layers merged before typed decoding.
pub struct Layers {
    table: Table,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl Layers {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        Ok(Self { table })
    }

    /// Applies `QRAUG_TRAIN__ADAM__LR=1e-3` style variables; names without
    /// a section separator are ignored.
    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (key, raw) in vars {
            let rest = &key[ENV_PREFIX.len()..];
            if !rest.contains(ENV_SEPARATOR) {
                continue;
            }
            let path: Vec<String> = rest.split(ENV_SEPARATOR).map(str::to_lowercase).collect();
            self.set_path(&path, parse_value(&raw)).with_context(|| format!("environment variable {key}"))?;
        }
        Ok(self)
    }

    /// Sets a dotted key such as `train.steps`.
    pub fn set(&mut self, dotted: &str, value: impl Into<Value>) -> Result<()> {
        let path: Vec<String> = dotted.split('.').map(str::to_string).collect();
        self.set_path(&path, value.into())
    }

    pub fn set_opt<V: Into<Value>>(&mut self, dotted: &str, value: Option<V>) -> Result<()> {
        match value {
            Some(v) => self.set(dotted, v),
            None => Ok(()),
        }
    }

    fn set_path(&mut self, path: &[String], value: Value) -> Result<()> {
        let (last, parents) = path.split_last().expect("non-empty key path");
        let mut table = &mut self.table;
        for (depth, part) in parents.iter().enumerate() {
            let entry = table.entry(part.clone()).or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => bail!("{} is not a section", path[..=depth].join(".")),
            };
        }
        table.insert(last.clone(), value);
        Ok(())
    }

    pub fn build(self) -> Result<Config> {
        let config: Config = Value::Table(self.table).try_into().context("invalid configuration")?;
        Ok(config)
    }
}

/// File, environment and flags, in increasing precedence.
pub fn load(path: Option<&Path>, flags: impl FnOnce(&mut Layers) -> Result<()>) -> Result<Config> {
    let mut layers = Layers::from_file(path)?.with_env(std::env::vars())?;
    flags(&mut layers)?;
    layers.build()
}
