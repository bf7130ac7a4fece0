use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 4] = b"VNTR";
pub const VERSION: u16 = 1;
const PREFIX_LEN: usize = 4 + 2 + 4;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Parameters, configuration and (optionally) optimizer state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    decay: bool,
    /// Byte offset from the start of the tensor data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: Vocab,
    step: u64,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<(Model<f32>, Vocab)> {
        Ok((Model::from_parts(self.model, self.params)?, self.vocab))
    }

    /// Rejects a checkpoint whose tensors do not have the shapes `expected` implies.
    pub fn check_shapes(&self, expected: &ModelConfig) -> Result<()> {
        for (name, shape) in expected.param_shapes()? {
            match self.params.get(&name) {
                None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
                Some(p) if p.shape != shape => {
                    return Err(Error::Config(format!(
                        "shape mismatch for {name}: checkpoint has {:?}, configuration expects {shape:?}",
                        p.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, decay: bool, values: &[f32]| {
            entries.push(TensorEntry {
                name,
                shape,
                decay,
                offset: data.len() as u64,
            });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, p) in self.params.iter() {
            push(name.clone(), p.shape.clone(), p.decay, &p.data);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
                for (name, values) in moments {
                    push(format!("{prefix}{name}"), vec![values.len()], false, values);
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            seed: self.seed,
            train: self.train.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let header_len =
            u32::try_from(header.len()).map_err(|_| Error::Config("checkpoint header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    /// Parses a checkpoint; any defect yields an error naming its byte offset.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < PREFIX_LEN {
            return Err(err(bytes.len(), "file shorter than the fixed prefix".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(0, "missing VNTR magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(err(4, format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let data_start = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(6, format!("header length {header_len} runs past end of file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..data_start]).map_err(|e| {
            err(
                PREFIX_LEN + e.column().saturating_sub(1),
                format!("corrupt header: {e}"),
            )
        })?;

        let data = &bytes[data_start..];
        let mut params = ParamStore::new();
        let mut optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            ..OptimizerState::new()
        });
        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            let at = data_start as u64 + entry.offset;
            if entry.offset != expected_offset {
                return Err(err(at as usize, format!("tensor {} is not contiguous", entry.name)));
            }
            let len: usize = entry.shape.iter().product();
            let end = entry.offset as usize + 4 * len;
            if end > data.len() {
                return Err(err(
                    data_start + data.len(),
                    format!(
                        "tensor {} truncated: needs bytes up to {}",
                        entry.name,
                        data_start + end
                    ),
                ));
            }
            let values: Vec<f32> = data[entry.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            expected_offset = end as u64;
            let moment = [(M_PREFIX, true), (V_PREFIX, false)]
                .into_iter()
                .find_map(|(prefix, first)| entry.name.strip_prefix(prefix).map(|n| (n, first)));
            match (moment, optimizer.as_mut()) {
                (Some((name, true)), Some(opt)) => {
                    opt.m.insert(name.to_string(), values);
                }
                (Some((name, false)), Some(opt)) => {
                    opt.v.insert(name.to_string(), values);
                }
                (Some(_), None) => {
                    return Err(err(
                        at as usize,
                        format!("moment {} without optimizer state", entry.name),
                    ));
                }
                (None, _) => params
                    .insert(entry.name.clone(), &entry.shape, values, entry.decay)
                    .map_err(|e| err(at as usize, e.to_string()))?,
            }
        }
        if expected_offset as usize != data.len() {
            return Err(err(
                data_start + expected_offset as usize,
                format!(
                    "{} trailing bytes after the last tensor",
                    data.len() - expected_offset as usize
                ),
            ));
        }
        if let Some(opt) = &optimizer {
            opt.validate(&params).map_err(|e| err(data_start, e.to_string()))?;
        }
        Ok(Self {
            model: header.model,
            vocab: header.vocab,
            params,
            optimizer,
            step: header.step,
            seed: header.seed,
            train: header.train,
        })
    }
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}
