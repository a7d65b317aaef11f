//! Checkpoint directories: `manifest.json` plus one little-endian `f64`
//! file per array, each listed with its shape and SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub config: AdamWConfig,
    pub first_moment: Vec<ArrayEntry>,
    pub second_moment: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub iteration: u64,
    /// Snapshot of the configuration that produced the state.
    pub config: serde_json::Value,
    pub params: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<(u64, AdamWConfig, Vec<Tensor>, Vec<Tensor>)>,
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_array(dir: &Path, sub: &str, name: &str, t: &Tensor) -> Result<ArrayEntry> {
    let file = format!("{sub}/{name}.bin");
    let bytes = encode(t);
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(ArrayEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        file,
        sha256: sha_hex(&bytes),
    })
}

fn read_array(dir: &Path, e: &ArrayEntry) -> Result<Tensor> {
    let err = |message: String| Error::Checkpoint {
        name: e.name.clone(),
        message,
    };
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|io| err(format!("cannot read {}: {io}", path.display())))?;
    if sha_hex(&bytes) != e.sha256 {
        return Err(err(format!("checksum mismatch in {}", e.file)));
    }
    let n: usize = e.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(err(format!("{} bytes for shape {:?}", bytes.len(), e.shape)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::from_vec(e.shape.clone(), data))
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

/// Writes a checkpoint into `dir`, replacing any previous one. The state is
/// written next to `dir` first and moved into place once complete.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, optimizer: Option<&AdamW>, iteration: u64, config: &impl Serialize) -> Result<()> {
    let tmp = tmp_sibling(dir);
    let result = write_into(&tmp, store, optimizer, iteration, config);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn write_into(dir: &Path, store: &ParamStore, optimizer: Option<&AdamW>, iteration: u64, config: &impl Serialize) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for sub in ["params", "optimizer"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let params = store.iter().map(|(n, t)| write_array(dir, "params", n, t)).collect::<Result<Vec<_>>>()?;
    let optimizer = match optimizer {
        Some(opt) => {
            let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
            let moments = |tag: &str, ts: &[Tensor]| {
                names
                    .iter()
                    .zip(ts)
                    .map(|(n, t)| write_array(dir, "optimizer", &format!("{n}.{tag}"), t))
                    .collect::<Result<Vec<_>>>()
            };
            Some(OptimizerEntry {
                step: opt.step,
                config: opt.config.clone(),
                first_moment: moments("m", &opt.m)?,
                second_moment: moments("v", &opt.v)?,
            })
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        iteration,
        config: serde_json::to_value(config)?,
        params,
        optimizer,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            name: MANIFEST.into(),
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let params = manifest
        .params
        .iter()
        .map(|e| Ok((e.name.clone(), read_array(dir, e)?)))
        .collect::<Result<Vec<_>>>()?;
    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let m = o.first_moment.iter().map(|e| read_array(dir, e)).collect::<Result<Vec<_>>>()?;
            let v = o.second_moment.iter().map(|e| read_array(dir, e)).collect::<Result<Vec<_>>>()?;
            Some((o.step, o.config.clone(), m, v))
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}

impl Checkpoint {
    pub fn iteration(&self) -> u64 {
        self.manifest.iteration
    }

    /// Copies every parameter of `store` from the checkpoint. A parameter the
    /// checkpoint lacks, or one with a different shape, is an error naming it.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let Some((_, t)) = self.params.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Checkpoint {
                    name,
                    message: "missing from checkpoint".into(),
                });
            };
            store.set(&name, t.clone()).map_err(|e| Error::Checkpoint {
                name: name.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Optimizer state matching `store`'s parameter order, when saved.
    pub fn optimizer_for(&self, store: &ParamStore) -> Result<Option<AdamW>> {
        let Some((step, cfg, m, v)) = &self.optimizer else {
            return Ok(None);
        };
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Checkpoint {
                name: "optimizer".into(),
                message: format!("{} moments for {} parameters", m.len(), store.len()),
            });
        }
        Ok(Some(AdamW {
            config: cfg.clone(),
            step: *step,
            m: m.clone(),
            v: v.clone(),
        }))
    }
}
