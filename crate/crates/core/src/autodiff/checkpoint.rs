use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "qraug-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamRecord<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Versioned JSON container of named parameter tensors plus free-form
/// metadata (model configuration, vocabulary).
///
/// Values are written with shortest round-trip formatting, so a
/// save/load cycle is lossless at the stored precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamRecord<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>, meta: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| ParamRecord { name: name.to_string(), shape: t.shape().to_vec(), values: t.data().to_vec() })
            .collect();
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, dtype: T::DTYPE.into(), meta, params }
    }

    pub fn to_store(&self) -> Result<ParamStore<T>, AutodiffError> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.insert(p.name.clone(), Tensor::new(p.shape.clone(), p.values.clone())?)?;
        }
        Ok(store)
    }

    /// Overwrites values of `store` by name; shapes and names must match exactly.
    pub fn load_into(&self, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        if self.params.len() != store.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .id(&p.name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("unexpected parameter {:?}", p.name)))?;
            let t = store.get_mut(id);
            if t.shape() != p.shape.as_slice() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter {:?}: shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&p.values);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_json(value)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, AutodiffError> {
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::Checkpoint(format!("unknown format {format:?}")));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or_default();
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = value.get("dtype").and_then(|v| v.as_str()).unwrap_or_default();
        if dtype != T::DTYPE {
            return Err(AutodiffError::Checkpoint(format!("stored dtype {dtype}, expected {}", T::DTYPE)));
        }
        let ck: Self = serde_json::from_value(value)?;
        for p in &ck.params {
            if p.shape.iter().product::<usize>() != p.values.len() {
                return Err(AutodiffError::Checkpoint(format!("parameter {:?}: value count does not match shape", p.name)));
            }
        }
        Ok(ck)
    }
}
