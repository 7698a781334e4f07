//! Checkpoint container.
//!
//! Layout: magic `VUNT`, format version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header, then the little-endian scalar payloads back to back in
//! header order. Payload offsets in the header are byte offsets from the end
//! of the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvKernel, KernelShape};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tensor::{DType, Scalar};

use super::config::ModelConfig;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VUNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: KernelShape,
    weight_offset: u64,
    bias_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    config: OptimizerConfig,
    t: u64,
    buffers: Vec<BufferEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: DType,
    step: u64,
    blocks: Vec<BlockEntry>,
    optimizer: Option<OptimizerEntry>,
    payload_bytes: u64,
}

/// A restored model with its optimizer state and step counter.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub step: u64,
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint<T: Scalar>(
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    step: u64,
) -> Result<Vec<u8>> {
    let esize = T::DTYPE.size_bytes() as u64;
    let mut payload = Vec::new();
    let mut blocks = Vec::new();
    for (layer, kern) in model.layers().iter().zip(model.kernels()) {
        let weight_offset = payload.len() as u64;
        kern.weights.iter().for_each(|v| v.extend_le_bytes(&mut payload));
        let bias_offset = payload.len() as u64;
        kern.bias.iter().for_each(|v| v.extend_le_bytes(&mut payload));
        blocks.push(BlockEntry {
            name: layer.name.clone(),
            shape: kern.shape(),
            weight_offset,
            bias_offset,
        });
    }
    let optimizer = optimizer.map(|opt| {
        let mut buffers = Vec::new();
        for (group, bufs) in opt.buffers() {
            for (i, buf) in bufs.iter().enumerate() {
                let layer = &model.layers()[i / 2];
                let part = if i % 2 == 0 { "weight" } else { "bias" };
                buffers.push(BufferEntry {
                    name: format!("{group}/{}.{part}", layer.name),
                    offset: payload.len() as u64,
                    len: buf.len() as u64,
                });
                buf.iter().for_each(|v| v.extend_le_bytes(&mut payload));
            }
        }
        OptimizerEntry {
            config: opt.config(),
            t: opt.step_count(),
            buffers,
        }
    });
    debug_assert_eq!(payload.len() as u64 % esize, 0);
    let header = Header {
        config: model.config().clone(),
        dtype: T::DTYPE,
        step,
        blocks,
        optimizer,
        payload_bytes: payload.len() as u64,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Format("checkpoint header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "checkpoint truncated: {} bytes, preamble needs 12",
            bytes.len()
        )));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[12..];
    if rest.len() < header_len {
        return Err(Error::Format("checkpoint truncated inside header".into()));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &rest[header_len..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, header promises {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    Ok((header, payload))
}

fn read_scalars<T: Scalar>(payload: &[u8], offset: u64, len: usize) -> Result<Vec<T>> {
    let esize = T::DTYPE.size_bytes();
    let start = offset as usize;
    let end = len
        .checked_mul(esize)
        .and_then(|n| start.checked_add(n))
        .ok_or_else(|| Error::Format("checkpoint block size overflows".into()))?;
    if end > payload.len() {
        return Err(Error::Format(format!(
            "checkpoint block [{start}, {end}) outside {}-byte payload",
            payload.len()
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(esize)
        .map(T::from_le_slice)
        .collect())
}

/// Parses a checkpoint; no model is produced unless every block checks out.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = split_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {:?} parameters, {:?} requested",
            header.dtype,
            T::DTYPE
        )));
    }
    let plan = header.config.layer_plan();
    if plan.len() != header.blocks.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} blocks, configuration implies {}",
            header.blocks.len(),
            plan.len()
        )));
    }
    let mut kernels = Vec::with_capacity(plan.len());
    for (spec, block) in plan.iter().zip(&header.blocks) {
        if spec.name != block.name || spec.shape != block.shape {
            return Err(Error::Format(format!(
                "checkpoint block {} {:?} disagrees with plan {} {:?}",
                block.name, block.shape, spec.name, spec.shape
            )));
        }
        let weights = read_scalars::<T>(payload, block.weight_offset, block.shape.weight_len())?;
        let bias = read_scalars::<T>(payload, block.bias_offset, block.shape.out_channels)?;
        kernels.push(ConvKernel::from_parts(block.shape, weights, bias)?);
    }
    let model = Model::from_kernels(&header.config, kernels)?;

    let optimizer = match &header.optimizer {
        None => None,
        Some(entry) => {
            let mut state = entry.config.init(model.kernels())?;
            state.set_step_count(entry.t);
            let mut entries = entry.buffers.iter();
            for group in state.buffers_mut() {
                for buf in group.iter_mut() {
                    let e = entries
                        .next()
                        .ok_or_else(|| Error::Format("missing optimizer buffer".into()))?;
                    if e.len as usize != buf.len() {
                        return Err(Error::Format(format!(
                            "optimizer buffer {} has {} values, expected {}",
                            e.name,
                            e.len,
                            buf.len()
                        )));
                    }
                    *buf = read_scalars::<T>(payload, e.offset, buf.len())?;
                }
            }
            if entries.next().is_some() {
                return Err(Error::Format("extra optimizer buffers in checkpoint".into()));
            }
            Some(state)
        }
    };

    Ok(Checkpoint {
        model,
        optimizer,
        step: header.step,
    })
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, step)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Reads only the scalar type recorded in a checkpoint header.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0.dtype)
}
