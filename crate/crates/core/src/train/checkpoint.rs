//! Checkpoint directories: `manifest.json` plus one raw little-endian `f64`
//! blob per tensor under `params/`, `adam_m/` and `adam_v/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, AdamSettings};
use super::StageLog;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, XlrcModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAM_DIR: &str = "params";
const M_DIR: &str = "adam_m";
const V_DIR: &str = "adam_v";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: XlrcModel,
    /// Optimizer of the last completed stage.
    pub optimizer: Option<Adam>,
    pub seed: u64,
    /// Number of completed stages.
    pub stage_index: usize,
    /// `M` of the last stage; prediction tokenizes with the same limit.
    pub max_seq_len: usize,
    pub history: Vec<StageLog>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    fingerprint: String,
    seed: u64,
    stage_index: usize,
    max_seq_len: usize,
    config: ModelConfig,
    vocab: Vocabulary,
    shapes: BTreeMap<String, Vec<usize>>,
    optimizer: Option<AdamSettings>,
    history: Vec<StageLog>,
}

/// SHA-256 over the configuration, vocabulary and tensor shapes.
pub fn fingerprint(config: &ModelConfig, vocab: &Vocabulary, shapes: &BTreeMap<String, Vec<usize>>) -> String {
    let canonical = serde_json::to_vec(&(config, vocab, shapes)).expect("plain data serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn shapes(params: &ParamStore) -> BTreeMap<String, Vec<usize>> {
    params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let numel: usize = shape.iter().product();
    if bytes.len() != 8 * numel {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes but shape {shape:?} needs {}",
            path.display(),
            bytes.len(),
            8 * numel
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    Tensor::new(shape.to_vec(), values)
}

fn write_dir(dir: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in tensors {
        write_blob(&dir.join(format!("{name}.bin")), t)?;
    }
    Ok(())
}

fn read_dir(dir: &Path, shapes: &BTreeMap<String, Vec<usize>>) -> Result<BTreeMap<String, Tensor>> {
    shapes
        .iter()
        .map(|(name, shape)| Ok((name.clone(), read_blob(&dir.join(format!("{name}.bin")), shape)?)))
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shapes = shapes(&self.model.params);
        let manifest = Manifest {
            format: FORMAT,
            fingerprint: fingerprint(&self.model.config, &self.model.vocab, &shapes),
            seed: self.seed,
            stage_index: self.stage_index,
            max_seq_len: self.max_seq_len,
            config: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            shapes,
            optimizer: self.optimizer.as_ref().map(|a| a.settings),
            history: self.history.clone(),
        };
        let params: BTreeMap<String, Tensor> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        write_dir(&dir.join(PARAM_DIR), &params)?;
        match &self.optimizer {
            Some(adam) => {
                write_dir(&dir.join(M_DIR), &adam.m)?;
                write_dir(&dir.join(V_DIR), &adam.v)?;
            }
            None => {
                for sub in [M_DIR, V_DIR] {
                    let p = dir.join(sub);
                    if p.exists() {
                        fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
        }
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
        }
        let expected = fingerprint(&m.config, &m.vocab, &m.shapes);
        if expected != m.fingerprint {
            return Err(Error::Checkpoint(format!(
                "fingerprint mismatch: manifest says {} but its contents hash to {expected}",
                m.fingerprint
            )));
        }
        let mut params = ParamStore::new();
        for (name, t) in read_dir(&dir.join(PARAM_DIR), &m.shapes)? {
            params.insert(name, t);
        }
        let optimizer = match m.optimizer {
            Some(settings) => {
                // moments exist only for parameters that were updated
                let present = |sub: &str| -> BTreeMap<String, Vec<usize>> {
                    m.shapes
                        .iter()
                        .filter(|(n, _)| dir.join(sub).join(format!("{n}.bin")).exists())
                        .map(|(n, s)| (n.clone(), s.clone()))
                        .collect()
                };
                Some(Adam {
                    settings,
                    m: read_dir(&dir.join(M_DIR), &present(M_DIR))?,
                    v: read_dir(&dir.join(V_DIR), &present(V_DIR))?,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            model: XlrcModel {
                config: m.config,
                vocab: m.vocab,
                params,
            },
            optimizer,
            seed: m.seed,
            stage_index: m.stage_index,
            max_seq_len: m.max_seq_len,
            history: m.history,
        })
    }
}
