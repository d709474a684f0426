//! Checkpoint files: a versioned JSON header (config, seed, epoch, parameter
//! manifest) followed by raw little-endian f64 arrays in manifest order.
//! Optimizer moments, when present, are appended after the model arrays so a
//! resumed run continues bit-exactly.

use super::{ModelConfig, ModelParams};
use crate::diffmath::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 10] = b"LHVAECKPT\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint header: {0}")]
    BadHeader(String),
    #[error("invalid config in checkpoint: {0}")]
    BadConfig(String),
    #[error(
        "parameter group {index} mismatch: checkpoint has {got_name} {got_shape:?}, config expects {want_name} {want_shape:?}"
    )]
    ManifestMismatch {
        index: usize,
        want_name: String,
        want_shape: Vec<usize>,
        got_name: String,
        got_shape: Vec<usize>,
    },
    #[error("checkpoint data truncated while reading {name}")]
    Truncated { name: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptHeader {
    step: u64,
    best_validation: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    epoch: u64,
    manifest: Vec<ManifestEntry>,
    opt_state: Option<OptHeader>,
}

/// Optimizer state stored alongside the model (first/second moments per
/// parameter group plus the step counter).
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub best_validation: Option<f64>,
}

impl OptState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            best_validation: None,
        }
    }
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub epoch: u64,
    pub opt_state: Option<OptState>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_array(out: &mut impl Write, tensor: &Tensor) -> std::io::Result<()> {
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(
    input: &mut impl Read,
    shape: &[usize],
    name: &str,
) -> Result<Tensor, CheckpointError> {
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|_| CheckpointError::Truncated {
            name: name.to_string(),
        })?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    seed: u64,
    epoch: u64,
    opt_state: Option<&OptState>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let err = io_err(path);
    let manifest: Vec<ManifestEntry> = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config().clone(),
        seed,
        epoch,
        manifest,
        opt_state: opt_state.map(|o| OptHeader {
            step: o.step,
            best_validation: o.best_validation,
        }),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let file = std::fs::File::create(path).map_err(&err)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC).map_err(&err)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(&err)?;
    out.write_all(&header_bytes).map_err(&err)?;
    for tensor in params.tensors() {
        write_array(&mut out, tensor).map_err(&err)?;
    }
    if let Some(opt) = opt_state {
        for tensor in opt.first_moment.iter().chain(&opt.second_moment) {
            write_array(&mut out, tensor).map_err(&err)?;
        }
    }
    out.flush().map_err(&err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let err = io_err(path);
    let file = std::fs::File::open(path).map_err(&err)?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 10];
    input.read_exact(&mut magic).map_err(&err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut len_bytes = [0u8; 4];
    input.read_exact(&mut len_bytes).map_err(&err)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes).map_err(&err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(header.format_version));
    }
    header
        .config
        .validate()
        .map_err(CheckpointError::BadConfig)?;

    // every shape in the manifest must match what the config dictates
    let mut params = ModelParams::zeros(&header.config);
    if header.manifest.len() != params.names().len() {
        return Err(CheckpointError::BadHeader(format!(
            "manifest has {} groups, config dictates {}",
            header.manifest.len(),
            params.names().len()
        )));
    }
    for (index, (entry, (want_name, want))) in header
        .manifest
        .iter()
        .zip(params.names().to_vec().iter().zip(params.tensors().to_vec()))
        .enumerate()
    {
        if entry.name != *want_name || entry.shape != want.shape() {
            return Err(CheckpointError::ManifestMismatch {
                index,
                want_name: want_name.clone(),
                want_shape: want.shape().to_vec(),
                got_name: entry.name.clone(),
                got_shape: entry.shape.clone(),
            });
        }
    }
    for (i, entry) in header.manifest.iter().enumerate() {
        params.tensors_mut()[i] = read_array(&mut input, &entry.shape, &entry.name)?;
    }

    let opt_state = match header.opt_state {
        None => None,
        Some(opt) => {
            let mut first = Vec::with_capacity(header.manifest.len());
            let mut second = Vec::with_capacity(header.manifest.len());
            for entry in &header.manifest {
                first.push(read_array(
                    &mut input,
                    &entry.shape,
                    &format!("opt.m.{}", entry.name),
                )?);
            }
            for entry in &header.manifest {
                second.push(read_array(
                    &mut input,
                    &entry.shape,
                    &format!("opt.v.{}", entry.name),
                )?);
            }
            Some(OptState {
                step: opt.step,
                first_moment: first,
                second_moment: second,
                best_validation: opt.best_validation,
            })
        }
    };

    Ok(Checkpoint {
        params,
        seed: header.seed,
        epoch: header.epoch,
        opt_state,
    })
}
