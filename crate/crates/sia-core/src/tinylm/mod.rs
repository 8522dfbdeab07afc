//! Minimal deterministic decoder-only transformer.
//!
//! Double-precision, dropout-free, pre-norm residual blocks:
//!
//! ```text
//! x ← x + Wo·MHA(LN1(x))        (causal multi-head attention)
//! x ← x + Wout·gelu(Win·LN2(x)) (feed-forward)
//! ```
//!
//! Pre-norm residuals are what make zero-output-projection block insertion
//! exactly function-preserving: a block whose `Wo` and `Wout` are all-zero
//! contributes exact zeros to the residual stream. There is no positional
//! embedding and no dropout, so (config, seed, batch) fully determine every
//! output bit.
//!
//! The default tokenizer is byte-level (`vocab_size` 256), a documented
//! stand-in that avoids shipping a trained vocabulary.

mod backward;
pub mod checkpoint;
mod forward;

pub use backward::{gradients, gradients_masked, loss_and_gradients, TrainExample};
pub use forward::{forward, generate_greedy, loss};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::rng_for;
use crate::tensor::Tensor;

/// Weight scale for Gaussian initialization, shared by [`init_model`] and
/// the non-zero tensors of inserted blocks.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
        {
            return Err(ModelError::Config("all dimension counts must be >= 1".into()));
        }
        if self.max_seq < 2 {
            return Err(ModelError::Config("max_seq must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Whether a block was part of the model at init time or inserted later by
/// depth up-scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Inserted,
}

/// LayerNorm gain and bias, stored as 1×d tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        Self { gain: Tensor::filled(1, d, 1.0), bias: Tensor::zeros(1, d) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub block_id: usize,
    pub origin: Origin,
    /// Attention projections, each d_model×d_model.
    pub attn_wq: Tensor,
    pub attn_wk: Tensor,
    pub attn_wv: Tensor,
    pub attn_wo: Tensor,
    /// Feed-forward in (d_model×d_ff) and out (d_ff×d_model).
    pub ffn_win: Tensor,
    pub ffn_wout: Tensor,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl BlockParams {
    /// Per-tensor views in the fixed documented order. This order defines
    /// both the checkpoint layout and the flattening used for block
    /// parameter similarity.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let id = self.block_id;
        vec![
            (format!("block{id}.attn_wq"), &self.attn_wq),
            (format!("block{id}.attn_wk"), &self.attn_wk),
            (format!("block{id}.attn_wv"), &self.attn_wv),
            (format!("block{id}.attn_wo"), &self.attn_wo),
            (format!("block{id}.ffn_win"), &self.ffn_win),
            (format!("block{id}.ffn_wout"), &self.ffn_wout),
            (format!("block{id}.norm1.gain"), &self.norm1.gain),
            (format!("block{id}.norm1.bias"), &self.norm1.bias),
            (format!("block{id}.norm2.gain"), &self.norm2.gain),
            (format!("block{id}.norm2.bias"), &self.norm2.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let id = self.block_id;
        vec![
            (format!("block{id}.attn_wq"), &mut self.attn_wq),
            (format!("block{id}.attn_wk"), &mut self.attn_wk),
            (format!("block{id}.attn_wv"), &mut self.attn_wv),
            (format!("block{id}.attn_wo"), &mut self.attn_wo),
            (format!("block{id}.ffn_win"), &mut self.ffn_win),
            (format!("block{id}.ffn_wout"), &mut self.ffn_wout),
            (format!("block{id}.norm1.gain"), &mut self.norm1.gain),
            (format!("block{id}.norm1.bias"), &mut self.norm1.bias),
            (format!("block{id}.norm2.gain"), &mut self.norm2.gain),
            (format!("block{id}.norm2.bias"), &mut self.norm2.bias),
        ]
    }
}

/// Full parameter set. Blocks are contiguous ordinals `0..len`, and `len`
/// may exceed `config.n_layers` after depth expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// vocab_size×d_model token embedding.
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: NormParams,
    /// d_model×vocab_size unembedding, untied from the embedding.
    pub unembedding: Tensor,
}

impl ModelParams {
    /// All parameter tensors keyed by their stable identifiers, in the
    /// fixed documented order: embedding, blocks 0..n (see
    /// [`BlockParams::tensors`]), final norm, unembedding.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for block in &self.blocks {
            out.extend(block.tensors());
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out.push(("final_norm.gain".to_string(), &mut self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &mut self.final_norm.bias));
        out.push(("unembedding".to_string(), &mut self.unembedding));
        out
    }

    pub fn tensor_ids(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(id, _)| id).collect()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// The origin of the block a tensor identifier belongs to; non-block
    /// tensors (embedding, unembedding, final norm) count as Original.
    pub fn tensor_origin(&self, id: &str) -> Origin {
        if let Some(rest) = id.strip_prefix("block") {
            if let Some(end) = rest.find('.') {
                if let Ok(ordinal) = rest[..end].parse::<usize>() {
                    if let Some(block) = self.blocks.get(ordinal) {
                        return block.origin;
                    }
                }
            }
        }
        Origin::Original
    }

    /// Bitwise equality of every tensor.
    pub fn bits_eq(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((ida, ta), (idb, tb))| ida == idb && ta.bits_eq(tb))
    }
}

/// One gradient tensor per parameter tensor, keyed by the parameter
/// identifier and shape-matched to it.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    map: BTreeMap<String, Tensor>,
}

impl GradientSet {
    /// All-zero gradients matching the model's parameters.
    pub fn zeros_like(params: &ModelParams) -> Self {
        let map = params
            .tensors()
            .into_iter()
            .map(|(id, t)| (id, t.zeros_like()))
            .collect();
        Self { map }
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.map.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        self.map.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        for (id, tensor) in &other.map {
            self.map
                .get_mut(id)
                .expect("gradient sets must share parameter identifiers")
                .add_assign(tensor);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for tensor in self.map.values_mut() {
            tensor.scale(s);
        }
    }
}

fn fresh_block(config: &ModelConfig, block_id: usize, rng: &mut rand_chacha::ChaCha20Rng) -> BlockParams {
    let d = config.d_model;
    let d_ff = config.d_ff;
    BlockParams {
        block_id,
        origin: Origin::Original,
        attn_wq: Tensor::randn(d, d, INIT_STD, rng),
        attn_wk: Tensor::randn(d, d, INIT_STD, rng),
        attn_wv: Tensor::randn(d, d, INIT_STD, rng),
        attn_wo: Tensor::randn(d, d, INIT_STD, rng),
        ffn_win: Tensor::randn(d, d_ff, INIT_STD, rng),
        ffn_wout: Tensor::randn(d_ff, d, INIT_STD, rng),
        norm1: NormParams::identity(d),
        norm2: NormParams::identity(d),
    }
}

/// Deterministically initializes a model: Gaussian weights at scale
/// [`INIT_STD`], norm gains 1 and biases 0, all blocks tagged Original.
pub fn init_model(config: ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "tinylm-init");
    let embedding = Tensor::randn(config.vocab_size, config.d_model, INIT_STD, &mut rng);
    let blocks = (0..config.n_layers)
        .map(|id| fresh_block(&config, id, &mut rng))
        .collect();
    let final_norm = NormParams::identity(config.d_model);
    let unembedding = Tensor::randn(config.d_model, config.vocab_size, INIT_STD, &mut rng);
    Ok(ModelParams { config, embedding, blocks, final_norm, unembedding })
}

/// Byte-level tokenization: each UTF-8 byte is one token id.
pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}
