//! Checkpoint directory: `manifest.json` plus one TSR1 file per named tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Detector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tsr;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// `"param"` or `"buffer"` (batch-norm running statistics).
    pub kind: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub step: u64,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

fn file_name(name: &str) -> String {
    format!("{name}.tsr")
}

pub fn save_checkpoint(dir: &Path, det: &Detector, config: &RunConfig, epoch: usize, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, p) in det.store.params() {
        tsr::write(&dir.join(file_name(name)), &p.value)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            kind: "param".into(),
            file: file_name(name),
        });
    }
    for (name, b) in det.store.buffers() {
        tsr::write(&dir.join(file_name(name)), b)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: b.shape().to_vec(),
            trainable: false,
            kind: "buffer".into(),
            file: file_name(name),
        });
    }
    let manifest = CheckpointManifest {
        epoch,
        step,
        trainable_parameters: det.store.trainable_count(),
        total_parameters: det.store.total_count(),
        config: config.clone(),
        tensors,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Rebuilds the detector from the stored config and fills every tensor by
/// name. Any missing, extra or reshaped tensor is reported in one error.
pub fn load_checkpoint(dir: &Path) -> Result<(Detector, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut det: Detector = Detector::new(manifest.config.model.clone(), 0)?;
    let mut expected: Vec<(String, Vec<usize>, &str)> = det
        .store
        .params()
        .map(|(n, p)| (n.to_string(), p.value.shape().to_vec(), "param"))
        .chain(det.store.buffers().map(|(n, b)| (n.to_string(), b.shape().to_vec(), "buffer")))
        .collect();
    expected.sort();
    let mut stored: Vec<(String, Vec<usize>, &str)> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone(), t.kind.as_str()))
        .collect();
    stored.sort();
    if expected != stored {
        let mut diff = Vec::new();
        for e in &expected {
            match stored.iter().find(|s| s.0 == e.0) {
                None => diff.push(format!("  missing {} {:?}", e.0, e.1)),
                Some(s) if s.1 != e.1 || s.2 != e.2 => {
                    diff.push(format!("  {}: checkpoint {:?} ({}), model {:?} ({})", e.0, s.1, s.2, e.1, e.2))
                }
                _ => {}
            }
        }
        for s in &stored {
            if !expected.iter().any(|e| e.0 == s.0) {
                diff.push(format!("  unexpected {} {:?}", s.0, s.1));
            }
        }
        return Err(Error::Config(format!(
            "checkpoint {} does not match its model config:\n{}",
            dir.display(),
            diff.join("\n")
        )));
    }
    let ids: Vec<_> = det.store.ids().collect();
    for id in ids {
        let name = det.store.name(id).to_string();
        let t: Tensor = tsr::read_tensor(&dir.join(file_name(&name)))?;
        check_shape(&name, &t, det.store.get(id).value.shape())?;
        det.store.get_mut(id).value = t;
    }
    for (name, b) in det.store.buffers_mut() {
        let t: Tensor = tsr::read_tensor(&dir.join(file_name(name)))?;
        check_shape(name, &t, b.shape())?;
        *b = t;
    }
    Ok((det, manifest))
}

fn check_shape(name: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::Config(format!(
            "tensor {name}: file holds {:?}, manifest and model say {want:?}",
            t.shape()
        )));
    }
    Ok(())
}
