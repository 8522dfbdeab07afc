//! Depth up-scaling: similarity-based insertion-point selection,
//! identity-initialized block insertion, and function-preservation checks.
//!
//! An inserted block starts with all-zero attention output projection and
//! feed-forward out matrix. On a pre-norm residual stack both sublayers
//! then contribute exact zeros, so expansion changes no logit until the new
//! block is trained.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::rng_for;
use crate::tensor::Tensor;
use crate::tinylm::{forward, BlockParams, ModelParams, NormParams, Origin, INIT_STD};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("model error: {0}")]
    Model(#[from] crate::tinylm::ModelError),
}

/// Cosine similarity of adjacent blocks' flattened parameters.
/// `pair_index` i means "between block i and block i+1".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub pair_index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub entries: Vec<SimilarityEntry>,
}

/// How inserted blocks get their non-zero tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpandMode {
    /// Fresh Gaussian init at the documented scale (default).
    FreshInit,
    /// Copy the left neighbor's tensors, then zero the output paths.
    DuplicateAndZero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub inserted_at: Vec<usize>,
    pub old_depth: usize,
    pub new_depth: usize,
    pub preservation_max_abs_diff: f64,
    pub probe_count: usize,
}

/// Cosine similarity with the zero-norm convention: if either vector has
/// zero norm the similarity is 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine requires equal lengths");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn flatten_block(block: &BlockParams) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, tensor) in block.tensors() {
        out.extend(tensor.iter());
    }
    out
}

/// Similarity of each adjacent block pair under a caller-supplied metric.
pub fn block_similarity_by(
    params: &ModelParams,
    metric: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<SimilarityTable, SurgeryError> {
    if params.blocks.len() < 2 {
        return Err(SurgeryError::Input(
            "similarity needs at least two blocks".into(),
        ));
    }
    let flats: Vec<Vec<f64>> = params.blocks.iter().map(flatten_block).collect();
    let entries = flats
        .windows(2)
        .enumerate()
        .map(|(pair_index, w)| SimilarityEntry {
            pair_index,
            similarity: metric(&w[0], &w[1]),
        })
        .collect();
    Ok(SimilarityTable { entries })
}

/// Adjacent-pair cosine similarity over concatenated flattened block
/// tensors in the fixed documented order.
pub fn block_similarity(params: &ModelParams) -> Result<SimilarityTable, SurgeryError> {
    block_similarity_by(params, cosine)
}

/// The k pair indices with highest similarity, ties broken toward the
/// lower pair index, returned sorted ascending.
pub fn select_insertion_points(
    table: &SimilarityTable,
    k: usize,
) -> Result<Vec<usize>, SurgeryError> {
    if k == 0 || k > table.entries.len() {
        return Err(SurgeryError::Input(format!(
            "k = {k} out of range for {} pairs",
            table.entries.len()
        )));
    }
    let mut ranked: Vec<&SimilarityEntry> = table.entries.iter().collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("similarities are finite")
            .then(a.pair_index.cmp(&b.pair_index))
    });
    let mut chosen: Vec<usize> = ranked[..k].iter().map(|e| e.pair_index).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

fn inserted_block(
    config: &crate::tinylm::ModelConfig,
    template: &BlockParams,
    final_position: usize,
    mode: ExpandMode,
) -> BlockParams {
    let d = config.d_model;
    let d_ff = config.d_ff;
    // Keyed by final ordinal so disjoint insertions commute: expanding at
    // {i, j} in one call or two produces byte-identical blocks.
    let mut rng = rng_for(config.seed, &format!("surgery-insert-{final_position}"));
    match mode {
        ExpandMode::FreshInit => BlockParams {
            block_id: final_position,
            origin: Origin::Inserted,
            attn_wq: Tensor::randn(d, d, INIT_STD, &mut rng),
            attn_wk: Tensor::randn(d, d, INIT_STD, &mut rng),
            attn_wv: Tensor::randn(d, d, INIT_STD, &mut rng),
            attn_wo: Tensor::zeros(d, d),
            ffn_win: Tensor::randn(d, d_ff, INIT_STD, &mut rng),
            ffn_wout: Tensor::zeros(d_ff, d),
            norm1: NormParams::identity(d),
            norm2: NormParams::identity(d),
        },
        ExpandMode::DuplicateAndZero => {
            let mut b = template.clone();
            b.block_id = final_position;
            b.origin = Origin::Inserted;
            b.attn_wo = Tensor::zeros(d, d);
            b.ffn_wout = Tensor::zeros(d_ff, d);
            b
        }
    }
}

/// Inserts one identity-initialized block after each listed pair index.
/// Original tensors are carried over byte-identical; ordinals are
/// renumbered contiguously with origin tags preserved.
pub fn expand_at(
    params: &ModelParams,
    points: &[usize],
    mode: ExpandMode,
) -> Result<(ModelParams, ExpansionReport), SurgeryError> {
    let pairs = params.blocks.len().saturating_sub(1);
    if points.is_empty() {
        return Err(SurgeryError::Input("no insertion points".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &p in points {
        if p >= pairs {
            return Err(SurgeryError::Input(format!(
                "pair index {p} out of range for {pairs} pairs"
            )));
        }
        if !seen.insert(p) {
            return Err(SurgeryError::Input(format!("duplicate pair index {p}")));
        }
    }

    let old_depth = params.blocks.len();
    let mut blocks: Vec<BlockParams> = Vec::with_capacity(old_depth + points.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let mut carried = block.clone();
        carried.block_id = blocks.len();
        blocks.push(carried);
        if seen.contains(&i) {
            let position = blocks.len();
            blocks.push(inserted_block(&params.config, block, position, mode));
        }
    }

    let expanded = ModelParams {
        config: params.config,
        embedding: params.embedding.clone(),
        blocks,
        final_norm: params.final_norm.clone(),
        unembedding: params.unembedding.clone(),
    };

    let probe_count = 8;
    let preservation_max_abs_diff = verify_function_preservation(
        params,
        &expanded,
        probe_count,
        crate::seeds::derive_seed(params.config.seed, "surgery-verify"),
    )?;
    let report = ExpansionReport {
        inserted_at: points.to_vec(),
        old_depth,
        new_depth: expanded.blocks.len(),
        preservation_max_abs_diff,
        probe_count,
    };
    Ok((expanded, report))
}

/// Expands by k blocks at the k most-similar adjacent pairs.
pub fn expand(
    params: &ModelParams,
    k: usize,
) -> Result<(ModelParams, ExpansionReport), SurgeryError> {
    expand_with(params, k, ExpandMode::FreshInit)
}

pub fn expand_with(
    params: &ModelParams,
    k: usize,
    mode: ExpandMode,
) -> Result<(ModelParams, ExpansionReport), SurgeryError> {
    let table = block_similarity(params)?;
    let points = select_insertion_points(&table, k)?;
    expand_at(params, &points, mode)
}

/// Runs seeded random probe sequences through both models and returns the
/// maximum absolute logit difference.
pub fn verify_function_preservation(
    old: &ModelParams,
    new: &ModelParams,
    probes: usize,
    seed: u64,
) -> Result<f64, SurgeryError> {
    if old.config.vocab_size != new.config.vocab_size || old.config.d_model != new.config.d_model {
        return Err(SurgeryError::Input(
            "models are incompatible (vocab_size or d_model differ)".into(),
        ));
    }
    if probes == 0 {
        return Err(SurgeryError::Input("probe count must be >= 1".into()));
    }
    let max_len = old.config.max_seq.min(new.config.max_seq);
    let vocab = old.config.vocab_size as u32;
    let mut rng = rng_for(seed, "preservation-probes");
    let mut max_diff = 0.0f64;
    for _ in 0..probes {
        let len = rng.gen_range(1..=max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let a = forward(old, &tokens)?;
        let b = forward(new, &tokens)?;
        max_diff = max_diff.max(a.max_abs_diff(&b));
    }
    Ok(max_diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_model, ModelConfig};

    fn config(n_layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            n_layers,
            d_ff: 16,
            max_seq: 12,
            seed: 41,
        }
    }

    fn zero_block(block: &mut BlockParams, d: usize) {
        block.attn_wq = block.attn_wq.zeros_like();
        block.attn_wk = block.attn_wk.zeros_like();
        block.attn_wv = block.attn_wv.zeros_like();
        block.attn_wo = block.attn_wo.zeros_like();
        block.ffn_win = block.ffn_win.zeros_like();
        block.ffn_wout = block.ffn_wout.zeros_like();
        block.norm1 = NormParams { gain: Tensor::zeros(1, d), bias: Tensor::zeros(1, d) };
        block.norm2 = NormParams { gain: Tensor::zeros(1, d), bias: Tensor::zeros(1, d) };
    }

    #[test]
    fn identical_blocks_have_similarity_one() {
        let mut params = init_model(config(3)).unwrap();
        params.blocks[1] = params.blocks[0].clone();
        params.blocks[1].block_id = 1;
        let table = block_similarity(&params).unwrap();
        assert!((table.entries[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_block_has_similarity_minus_one() {
        let mut params = init_model(config(2)).unwrap();
        let mut negated = params.blocks[0].clone();
        negated.block_id = 1;
        negated.attn_wq.scale(-1.0);
        negated.attn_wk.scale(-1.0);
        negated.attn_wv.scale(-1.0);
        negated.attn_wo.scale(-1.0);
        negated.ffn_win.scale(-1.0);
        negated.ffn_wout.scale(-1.0);
        negated.norm1.gain.scale(-1.0);
        negated.norm1.bias.scale(-1.0);
        negated.norm2.gain.scale(-1.0);
        negated.norm2.bias.scale(-1.0);
        params.blocks[1] = negated;
        let table = block_similarity(&params).unwrap();
        assert!((table.entries[0].similarity + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_naive_dot_product_oracle() {
        let params = init_model(config(3)).unwrap();
        let table = block_similarity(&params).unwrap();
        for pair in 0..2 {
            let a: Vec<f64> = params.blocks[pair]
                .tensors()
                .into_iter()
                .flat_map(|(_, t)| t.iter().collect::<Vec<_>>())
                .collect();
            let b: Vec<f64> = params.blocks[pair + 1]
                .tensors()
                .into_iter()
                .flat_map(|(_, t)| t.iter().collect::<Vec<_>>())
                .collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expected = dot / (na * nb);
            assert!((table.entries[pair].similarity - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_blocks_get_similarity_zero() {
        let mut params = init_model(config(2)).unwrap();
        zero_block(&mut params.blocks[0], 8);
        let table = block_similarity(&params).unwrap();
        assert_eq!(table.entries[0].similarity, 0.0);
    }

    #[test]
    fn single_block_model_is_rejected() {
        let params = init_model(config(1)).unwrap();
        assert!(matches!(block_similarity(&params), Err(SurgeryError::Input(_))));
    }

    #[test]
    fn selection_picks_argmax_and_breaks_ties_low() {
        let table = SimilarityTable {
            entries: vec![
                SimilarityEntry { pair_index: 0, similarity: 0.90 },
                SimilarityEntry { pair_index: 1, similarity: 0.95 },
                SimilarityEntry { pair_index: 2, similarity: 0.80 },
            ],
        };
        assert_eq!(select_insertion_points(&table, 1).unwrap(), vec![1]);

        let tied = SimilarityTable {
            entries: vec![
                SimilarityEntry { pair_index: 0, similarity: 0.90 },
                SimilarityEntry { pair_index: 1, similarity: 0.90 },
            ],
        };
        assert_eq!(select_insertion_points(&tied, 1).unwrap(), vec![0]);
        assert_eq!(select_insertion_points(&tied, 2).unwrap(), vec![0, 1]);
        assert!(select_insertion_points(&tied, 3).is_err());
        assert!(select_insertion_points(&tied, 0).is_err());
    }

    #[test]
    fn expand_inserts_tagged_blocks_and_preserves_function() {
        let params = init_model(config(4)).unwrap();
        let (expanded, report) = expand(&params, 2).unwrap();
        assert_eq!(expanded.blocks.len(), 6);
        assert_eq!(report.old_depth, 4);
        assert_eq!(report.new_depth, 6);
        assert_eq!(report.preservation_max_abs_diff, 0.0);
        let inserted: Vec<_> = expanded
            .blocks
            .iter()
            .filter(|b| b.origin == Origin::Inserted)
            .collect();
        assert_eq!(inserted.len(), 2);
        for block in &inserted {
            assert!(block.attn_wo.iter().all(|v| v == 0.0));
            assert!(block.ffn_wout.iter().all(|v| v == 0.0));
            assert!(block.attn_wq.iter().any(|v| v != 0.0));
        }
        for (i, block) in expanded.blocks.iter().enumerate() {
            assert_eq!(block.block_id, i);
        }
    }

    #[test]
    fn expansion_preserves_logits_bit_exactly() {
        let params = init_model(config(4)).unwrap();
        let (expanded, _) = expand(&params, 2).unwrap();
        for probe in [vec![1u32, 2, 3], vec![31, 0, 7, 8, 9, 10]] {
            let a = forward(&params, &probe).unwrap();
            let b = forward(&expanded, &probe).unwrap();
            assert!(a.bits_eq(&b));
        }
    }

    #[test]
    fn original_tensors_survive_expansion_byte_identical() {
        let params = init_model(config(4)).unwrap();
        let (expanded, report) = expand(&params, 1).unwrap();
        let originals: Vec<&BlockParams> = expanded
            .blocks
            .iter()
            .filter(|b| b.origin == Origin::Original)
            .collect();
        assert_eq!(originals.len(), 4);
        for (old, new) in params.blocks.iter().zip(originals) {
            assert!(old.attn_wq.bits_eq(&new.attn_wq));
            assert!(old.attn_wo.bits_eq(&new.attn_wo));
            assert!(old.ffn_win.bits_eq(&new.ffn_win));
            assert!(old.ffn_wout.bits_eq(&new.ffn_wout));
            assert!(old.norm1.gain.bits_eq(&new.norm1.gain));
        }
        assert!(params.embedding.bits_eq(&expanded.embedding));
        assert!(params.unembedding.bits_eq(&expanded.unembedding));
        assert_eq!(report.new_depth - report.old_depth, 1);
    }

    #[test]
    fn staged_expansion_equals_single_expansion_at_union() {
        use crate::tinylm::checkpoint::checkpoint_bytes;
        let params = init_model(config(5)).unwrap();
        // One shot at {1, 3}.
        let (once, _) = expand_at(&params, &[1, 3], ExpandMode::FreshInit).unwrap();
        // Two stages: insert at 1, then at what was pair 3 (now pair 4).
        let (first, _) = expand_at(&params, &[1], ExpandMode::FreshInit).unwrap();
        let (second, _) = expand_at(&first, &[4], ExpandMode::FreshInit).unwrap();
        assert_eq!(checkpoint_bytes(&once), checkpoint_bytes(&second));
    }

    #[test]
    fn duplicate_and_zero_mode_copies_neighbor() {
        let params = init_model(config(3)).unwrap();
        let (expanded, _) = expand_at(&params, &[0], ExpandMode::DuplicateAndZero).unwrap();
        let inserted = &expanded.blocks[1];
        assert_eq!(inserted.origin, Origin::Inserted);
        assert!(inserted.attn_wq.bits_eq(&params.blocks[0].attn_wq));
        assert!(inserted.attn_wo.iter().all(|v| v == 0.0));
        assert!(inserted.ffn_wout.iter().all(|v| v == 0.0));
        let diff = verify_function_preservation(&params, &expanded, 8, 3).unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn verify_rejects_incompatible_models() {
        let a = init_model(config(2)).unwrap();
        let mut other = config(2);
        other.vocab_size = 64;
        let b = init_model(other).unwrap();
        assert!(matches!(
            verify_function_preservation(&a, &b, 4, 1),
            Err(SurgeryError::Input(_))
        ));
    }

    #[test]
    fn invalid_expansion_points_are_rejected() {
        let params = init_model(config(3)).unwrap();
        assert!(expand(&params, 0).is_err());
        assert!(expand(&params, 3).is_err());
        assert!(expand_at(&params, &[5], ExpandMode::FreshInit).is_err());
        assert!(expand_at(&params, &[1, 1], ExpandMode::FreshInit).is_err());
    }

    #[test]
    fn selection_soundness_selected_dominate_unselected() {
        let params = init_model(config(6)).unwrap();
        let table = block_similarity(&params).unwrap();
        let chosen = select_insertion_points(&table, 2).unwrap();
        let min_chosen = chosen
            .iter()
            .map(|&i| table.entries[i].similarity)
            .fold(f64::INFINITY, f64::min);
        for entry in &table.entries {
            if !chosen.contains(&entry.pair_index) {
                assert!(entry.similarity <= min_chosen);
            }
        }
    }
}
