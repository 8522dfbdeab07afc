//! Lossless, self-describing model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic   b"SIACKPT1"                     (8 bytes)
//! len     header length                   (u64 little-endian)
//! header  JSON: config, block origin tags, tensor directory
//! data    tensor values in directory order, row-major f64 little-endian
//! ```
//!
//! The tensor directory follows the fixed parameter order of
//! [`ModelParams::tensors`], so serializing the same parameters always
//! produces identical bytes, and raw f64 storage round-trips bit-exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

use super::{BlockParams, ModelConfig, ModelParams, NormParams, Origin};

const MAGIC: &[u8; 8] = b"SIACKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockTag {
    id: usize,
    origin: Origin,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    blocks: Vec<BlockTag>,
    tensors: Vec<TensorEntry>,
}

/// Serializes parameters to the checkpoint byte format.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let header = Header {
        config: params.config,
        blocks: params
            .blocks
            .iter()
            .map(|b| BlockTag { id: b.block_id, origin: b.origin })
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), rows: t.rows(), cols: t.cols() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");

    let mut out = Vec::with_capacity(16 + header_json.len() + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in &tensors {
        for v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(params);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Reconstructs parameters from checkpoint bytes, validating shapes against
/// the embedded config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut cursor = io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cursor.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    cursor.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    cursor.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut read_tensor = |entry: &TensorEntry| -> Result<Tensor, CheckpointError> {
        let n = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            cursor.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Tensor::from_vec(entry.rows, entry.cols, data))
    };

    let mut entries = header.tensors.iter();
    let mut next = |expected: &str| -> Result<Tensor, CheckpointError> {
        let entry = entries
            .next()
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {expected}")))?;
        if entry.name != expected {
            return Err(CheckpointError::Format(format!(
                "expected tensor {expected}, found {}",
                entry.name
            )));
        }
        read_tensor(entry)
    };

    let embedding = next("embedding")?;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for (ordinal, tag) in header.blocks.iter().enumerate() {
        if tag.id != ordinal {
            return Err(CheckpointError::Format(format!(
                "block ordinals not contiguous at {ordinal}"
            )));
        }
        let block = BlockParams {
            block_id: tag.id,
            origin: tag.origin,
            attn_wq: next(&format!("block{ordinal}.attn_wq"))?,
            attn_wk: next(&format!("block{ordinal}.attn_wk"))?,
            attn_wv: next(&format!("block{ordinal}.attn_wv"))?,
            attn_wo: next(&format!("block{ordinal}.attn_wo"))?,
            ffn_win: next(&format!("block{ordinal}.ffn_win"))?,
            ffn_wout: next(&format!("block{ordinal}.ffn_wout"))?,
            norm1: NormParams {
                gain: next(&format!("block{ordinal}.norm1.gain"))?,
                bias: next(&format!("block{ordinal}.norm1.bias"))?,
            },
            norm2: NormParams {
                gain: next(&format!("block{ordinal}.norm2.gain"))?,
                bias: next(&format!("block{ordinal}.norm2.bias"))?,
            },
        };
        blocks.push(block);
    }
    let final_norm = NormParams {
        gain: next("final_norm.gain")?,
        bias: next("final_norm.bias")?,
    };
    let unembedding = next("unembedding")?;
    if entries.next().is_some() {
        return Err(CheckpointError::Format("trailing tensor entries".into()));
    }

    let params = ModelParams { config: header.config, embedding, blocks, final_norm, unembedding };
    validate_shapes(&params)?;
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

fn validate_shapes(params: &ModelParams) -> Result<(), CheckpointError> {
    let c = &params.config;
    let expect = |name: &str, t: &Tensor, rows: usize, cols: usize| {
        if t.shape() == (rows, cols) {
            Ok(())
        } else {
            Err(CheckpointError::Format(format!(
                "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                t.shape()
            )))
        }
    };
    expect("embedding", &params.embedding, c.vocab_size, c.d_model)?;
    expect("unembedding", &params.unembedding, c.d_model, c.vocab_size)?;
    expect("final_norm.gain", &params.final_norm.gain, 1, c.d_model)?;
    expect("final_norm.bias", &params.final_norm.bias, 1, c.d_model)?;
    if params.blocks.len() < c.n_layers {
        return Err(CheckpointError::Format(format!(
            "{} blocks is fewer than config n_layers {}",
            params.blocks.len(),
            c.n_layers
        )));
    }
    for block in &params.blocks {
        let id = block.block_id;
        expect(&format!("block{id}.attn_wq"), &block.attn_wq, c.d_model, c.d_model)?;
        expect(&format!("block{id}.attn_wk"), &block.attn_wk, c.d_model, c.d_model)?;
        expect(&format!("block{id}.attn_wv"), &block.attn_wv, c.d_model, c.d_model)?;
        expect(&format!("block{id}.attn_wo"), &block.attn_wo, c.d_model, c.d_model)?;
        expect(&format!("block{id}.ffn_win"), &block.ffn_win, c.d_model, c.d_ff)?;
        expect(&format!("block{id}.ffn_wout"), &block.ffn_wout, c.d_ff, c.d_model)?;
        expect(&format!("block{id}.norm1.gain"), &block.norm1.gain, 1, c.d_model)?;
        expect(&format!("block{id}.norm1.bias"), &block.norm1.bias, 1, c.d_model)?;
        expect(&format!("block{id}.norm2.gain"), &block.norm2.gain, 1, c.d_model)?;
        expect(&format!("block{id}.norm2.bias"), &block.norm2.bias, 1, c.d_model)?;
    }
    Ok(())
}
