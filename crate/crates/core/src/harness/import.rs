//! Validation of a directory of embedding archives before training on it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::load_dataset;
use crate::encoder::{block_indices, load_embeddings, EncoderConfig, MANIFEST_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ImportSummary {
    pub dir: PathBuf,
    /// Archive names (sub-directory names), sorted.
    pub archives: Vec<String>,
    pub config: EncoderConfig,
    pub blocks: [[usize; 3]; 4],
    /// Dataset samples without an archive, when a dataset was given.
    pub missing: Vec<String>,
}

/// Loads every archive under `dir` (either `dir` itself or its immediate
/// sub-directories) and checks they share one layout. With `data`, every
/// sample must have an archive named after it.
pub fn import_embeddings(dir: &Path, data: Option<&Path>) -> Result<ImportSummary> {
    let mut archives: Vec<(String, PathBuf)> = Vec::new();
    if dir.join(MANIFEST_FILE).exists() {
        let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string();
        archives.push((name, dir.to_path_buf()));
    } else {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.join(MANIFEST_FILE).exists() {
                let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string();
                archives.push((name, p));
            }
        }
    }
    archives.sort();
    if archives.is_empty() {
        return Err(Error::Invalid(format!("{}: no embedding archives found", dir.display())));
    }
    let mut config: Option<EncoderConfig> = None;
    for (name, p) in &archives {
        let f = load_embeddings(p)?;
        match &config {
            None => config = Some(f.config),
            Some(c) if *c != f.config => {
                return Err(Error::Invalid(format!(
                    "archive {name} has layout {:?}, the first archive has {c:?}",
                    f.config
                )))
            }
            _ => {}
        }
    }
    let config = config.unwrap();
    let blocks = block_indices(&config)?;
    let names: Vec<String> = archives.into_iter().map(|(n, _)| n).collect();
    let missing = match data {
        Some(root) => load_dataset(root)?
            .samples
            .iter()
            .filter(|s| names.binary_search(&s.name).is_err())
            .map(|s| s.name.clone())
            .collect(),
        None => Vec::new(),
    };
    Ok(ImportSummary {
        dir: dir.to_path_buf(),
        archives: names,
        config,
        blocks,
        missing,
    })
}
