//! Checkpoint container: a JSON manifest followed by raw little-endian
//! float64 arrays.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic "TGCKPT01"
//! bytes 8..16   u64 LE: manifest length in bytes
//! manifest      JSON (epoch, config, config hash, rng state, traces,
//!               array directory with names and shapes)
//! arrays        f64 LE data, concatenated in directory order
//! ```
//!
//! Reloading reproduces forward outputs bit-identically: array bytes
//! are written and read without any numeric conversion.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::interpret::ImportanceStack;
use crate::model::ModelState;
use crate::tensor::{RngState, Tensor};
use crate::train::{AdamState, EpochRecord, TrainOutput};

const MAGIC: &[u8; 8] = b"TGCKPT01";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    epoch: usize,
    best_epoch: usize,
    best_val_balanced_accuracy: f64,
    diverged: bool,
    seed: u64,
    config: TrainConfig,
    config_hash: String,
    rng: RngState,
    adam_step: usize,
    records: Vec<EpochRecord>,
    convergence: Vec<f64>,
    arrays: Vec<ArrayEntry>,
}

/// A trained model plus everything needed to resume or audit the run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState,
    pub adam: AdamState,
    pub rng: RngState,
    pub seed: u64,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub diverged: bool,
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub convergence: Vec<f64>,
}

impl Checkpoint {
    pub fn from_training(config: &TrainConfig, seed: u64, output: &TrainOutput) -> Self {
        Checkpoint {
            state: output.state.clone(),
            adam: output.adam.clone(),
            rng: output.rng_state.clone(),
            seed,
            epoch: output.epochs_run,
            best_epoch: output.best_epoch,
            best_val_balanced_accuracy: output.best_val_balanced_accuracy,
            diverged: output.diverged,
            config: config.clone(),
            records: output.records.clone(),
            convergence: output.convergence.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (name, t) in self.state.params() {
            arrays.push((name, t.shape().to_vec(), t.data().to_vec()));
        }
        for (t, slice) in self.state.importance.slices.iter().enumerate() {
            arrays.push((
                format!("importance.{t}"),
                slice.shape().to_vec(),
                slice.data().to_vec(),
            ));
        }
        for (c, stack) in self.state.label_importance.iter().enumerate() {
            for (t, slice) in stack.slices.iter().enumerate() {
                arrays.push((
                    format!("label_importance.{c}.{t}"),
                    slice.shape().to_vec(),
                    slice.data().to_vec(),
                ));
            }
        }
        for (name, buf) in &self.adam.m {
            arrays.push((format!("adam.m.{name}"), vec![buf.len()], buf.clone()));
        }
        for (name, buf) in &self.adam.v {
            arrays.push((format!("adam.v.{name}"), vec![buf.len()], buf.clone()));
        }

        let manifest = Manifest {
            version: 1,
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_val_balanced_accuracy: self.best_val_balanced_accuracy,
            diverged: self.diverged,
            seed: self.seed,
            config: self.config.clone(),
            config_hash: format!("{:016x}", self.config.hash()),
            rng: self.rng.clone(),
            adam_step: self.adam.step,
            records: self.records.clone(),
            convergence: self.convergence.clone(),
            arrays: arrays
                .iter()
                .map(|(name, shape, _)| ArrayEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        for (_, _, data) in &arrays {
            for v in data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.version != 1 {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for entry in &manifest.arrays {
            let numel: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            file.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }

        // Rebuild the typed state: initialize with the stored shapes,
        // then overwrite every tensor from the directory. Feature and
        // class counts come from the stored arrays themselves.
        let features = tensors
            .get("theta")
            .ok_or_else(|| Error::Data("checkpoint missing theta".into()))?
            .shape()[1];
        let classes = tensors
            .keys()
            .filter_map(|k| k.strip_prefix("label_importance.")?.split('.').next()?.parse::<usize>().ok())
            .max()
            .map(|c| c + 1)
            .ok_or_else(|| Error::Data("checkpoint missing label importance stacks".into()))?;
        // Steps per window do not shape any parameter.
        let model_config = manifest.config.model_config(features, 1, classes);
        let mut state = ModelState::init(model_config, manifest.seed, None)?;
        for (name, t) in state.params_mut() {
            let stored = tensors
                .remove(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing array {name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "array {name}: shape {:?} vs expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored;
        }
        let s = state.config.windows;
        let mut importance = Vec::with_capacity(s);
        for t in 0..s {
            importance.push(
                tensors
                    .remove(&format!("importance.{t}"))
                    .ok_or_else(|| Error::Data(format!("checkpoint missing importance.{t}")))?,
            );
        }
        state.importance = ImportanceStack { slices: importance };
        let mut label_importance = Vec::new();
        for c in 0..classes {
            let mut slices = Vec::with_capacity(s);
            for t in 0..s {
                slices.push(tensors.remove(&format!("label_importance.{c}.{t}")).ok_or_else(
                    || Error::Data(format!("checkpoint missing label_importance.{c}.{t}")),
                )?);
            }
            label_importance.push(ImportanceStack { slices });
        }
        state.label_importance = label_importance;

        let mut adam = AdamState {
            step: manifest.adam_step,
            ..Default::default()
        };
        for (name, t) in tensors {
            if let Some(param) = name.strip_prefix("adam.m.") {
                adam.m.insert(param.to_string(), t.data().to_vec());
            } else if let Some(param) = name.strip_prefix("adam.v.") {
                adam.v.insert(param.to_string(), t.data().to_vec());
            }
        }

        Ok(Checkpoint {
            state,
            adam,
            rng: manifest.rng,
            seed: manifest.seed,
            epoch: manifest.epoch,
            best_epoch: manifest.best_epoch,
            best_val_balanced_accuracy: manifest.best_val_balanced_accuracy,
            diverged: manifest.diverged,
            config: manifest.config,
            records: manifest.records,
            convergence: manifest.convergence,
        })
    }
}
