//! Checkpoint directories.
//!
//! A checkpoint is a directory holding one tensor container per parameter
//! (`params/<name>.tnsr`) and per batch-norm buffer (`buffers/<name>.tnsr`)
//! plus `manifest.json` with shapes, the model configuration, the epoch and
//! the trainer's RNG position. Parameters are stored as `f32`, so an `f32`
//! model round-trips bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::RngState;
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Element;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub params: BTreeMap<String, Vec<usize>>,
    pub buffers: BTreeMap<String, Vec<usize>>,
}

/// Writes `model` to `dir`, replacing any previous checkpoint files there.
pub fn save<E: Element>(model: &Model<E>, dir: impl AsRef<Path>, epoch: usize, rng: Option<RngState>) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["params", "buffers"] {
        let p = dir.join(sub);
        if p.exists() {
            std::fs::remove_dir_all(&p)?;
        }
        std::fs::create_dir_all(&p)?;
    }
    let mut manifest = Manifest {
        config: model.config.clone(),
        epoch,
        rng,
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    for (name, t) in model.params.iter() {
        save_tensor(t, dir.join("params").join(format!("{name}.tnsr")))?;
        manifest.params.insert(name.clone(), t.shape().to_vec());
    }
    for (name, t) in model.params.buffers() {
        save_tensor(t, dir.join("buffers").join(format!("{name}.tnsr")))?;
        manifest.buffers.insert(name.clone(), t.shape().to_vec());
    }
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a checkpoint, checking every tensor against the manifest and the
/// manifest against the parameters its configuration defines.
pub fn load<E: Element>(dir: impl AsRef<Path>) -> Result<(Model<E>, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    let reference = Model::<E>::new(manifest.config.clone(), 0)?;
    let expected: BTreeMap<_, _> = reference.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
    if expected != manifest.params {
        return Err(Error::Format("checkpoint parameters do not match its configuration".into()));
    }
    let mut params = ParamStore::new();
    for (name, shape) in &manifest.params {
        let t = load_tensor::<E>(dir.join("params").join(format!("{name}.tnsr")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("`{name}` has shape {:?}, manifest says {shape:?}", t.shape())));
        }
        params.insert(name.clone(), t)?;
    }
    for (name, shape) in &manifest.buffers {
        let t = load_tensor::<E>(dir.join("buffers").join(format!("{name}.tnsr")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("buffer `{name}` has shape {:?}, manifest says {shape:?}", t.shape())));
        }
        params.set_buffer(name.clone(), t);
    }
    Ok((Model { config: manifest.config.clone(), params }, manifest))
}
