//! Forward pass, loss, and greedy decoding.

use crate::tensor::Tensor;

use super::{BlockParams, ModelError, ModelParams, NormParams};

pub(crate) const LN_EPS: f64 = 1e-5;

/// tanh-approximation GELU; smooth everywhere, which keeps the
/// finite-difference gradient checks clean.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-row LayerNorm statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormTrace {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Tensor, norm: &NormParams) -> (Tensor, NormTrace) {
    let (rows, d) = x.shape();
    let mut out = Tensor::zeros(rows, d);
    let mut trace = NormTrace { mean: Vec::with_capacity(rows), inv_std: Vec::with_capacity(rows) };
    let gain = norm.gain.row(0);
    let bias = norm.bias.row(0);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let out_row = out.row_mut(r);
        for c in 0..d {
            let xhat = (row[c] - mean) * inv_std;
            out_row[c] = gain[c] * xhat + bias[c];
        }
        trace.mean.push(mean);
        trace.inv_std.push(inv_std);
    }
    (out, trace)
}

/// Everything the backward pass needs from one block's forward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    pub x_in: Tensor,
    pub n1: Tensor,
    pub n1_trace: NormTrace,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Softmax attention weights, one T×T lower-triangular matrix per head.
    pub attn: Vec<Tensor>,
    pub ctx: Tensor,
    pub x_mid: Tensor,
    pub n2: Tensor,
    pub n2_trace: NormTrace,
    pub ffn_pre: Tensor,
    pub ffn_act: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub x_final: Tensor,
    pub nf: Tensor,
    pub nf_trace: NormTrace,
    pub logits: Tensor,
}

fn validate_tokens(params: &ModelParams, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Input("empty token sequence".into()));
    }
    if tokens.len() > params.config.max_seq {
        return Err(ModelError::Input(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            params.config.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.config.vocab_size) {
        return Err(ModelError::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            params.config.vocab_size
        )));
    }
    Ok(())
}

fn attention(block: &BlockParams, n1: &Tensor, n_heads: usize) -> (Tensor, Tensor, Tensor, Vec<Tensor>, Tensor) {
    let t_len = n1.rows();
    let d = n1.cols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = n1.matmul(&block.attn_wq);
    let k = n1.matmul(&block.attn_wk);
    let v = n1.matmul(&block.attn_wv);

    let mut attn = Vec::with_capacity(n_heads);
    let mut ctx = Tensor::zeros(t_len, d);
    for h in 0..n_heads {
        let off = h * head_dim;
        let mut weights = Tensor::zeros(t_len, t_len);
        for i in 0..t_len {
            // Causal: position i attends to positions 0..=i only.
            let qi = &q.row(i)[off..off + head_dim];
            let mut scores = Vec::with_capacity(i + 1);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[off..off + head_dim];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut denom = 0.0;
            for s in &mut scores {
                *s = (*s - max).exp();
                denom += *s;
            }
            let wrow = weights.row_mut(i);
            for (j, s) in scores.iter().enumerate() {
                wrow[j] = s / denom;
            }
            let ctx_row = ctx.row_mut(i);
            for j in 0..=i {
                let w = wrow[j];
                let vj = &v.row(j)[off..off + head_dim];
                for (c, &vv) in vj.iter().enumerate() {
                    ctx_row[off + c] += w * vv;
                }
            }
        }
        attn.push(weights);
    }
    (q, k, v, attn, ctx)
}

pub(crate) fn forward_trace(params: &ModelParams, tokens: &[u32]) -> Result<ForwardTrace, ModelError> {
    validate_tokens(params, tokens)?;
    let d = params.config.d_model;
    let t_len = tokens.len();

    let mut x = Tensor::zeros(t_len, d);
    for (i, &tok) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(params.embedding.row(tok as usize));
    }

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let x_in = x.clone();
        let (n1, n1_trace) = layer_norm(&x, &block.norm1);
        let (q, k, v, attn, ctx) = attention(block, &n1, params.config.n_heads);
        let attn_out = ctx.matmul(&block.attn_wo);
        let mut x_mid = x;
        x_mid.add_assign(&attn_out);

        let (n2, n2_trace) = layer_norm(&x_mid, &block.norm2);
        let ffn_pre = n2.matmul(&block.ffn_win);
        let mut ffn_act = ffn_pre.clone();
        for v in ffn_act.data_mut() {
            *v = gelu(*v);
        }
        let ffn_out = ffn_act.matmul(&block.ffn_wout);
        let mut x_out = x_mid.clone();
        x_out.add_assign(&ffn_out);

        blocks.push(BlockTrace {
            x_in,
            n1,
            n1_trace,
            q,
            k,
            v,
            attn,
            ctx,
            x_mid,
            n2,
            n2_trace,
            ffn_pre,
            ffn_act,
        });
        x = x_out;
    }

    let x_final = x;
    let (nf, nf_trace) = layer_norm(&x_final, &params.final_norm);
    let logits = nf.matmul(&params.unembedding);
    Ok(ForwardTrace { blocks, x_final, nf, nf_trace, logits })
}

/// Runs the model over a token sequence and returns seq_len×vocab_size
/// logits. Causal, deterministic, no dropout.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<Tensor, ModelError> {
    Ok(forward_trace(params, tokens)?.logits)
}

/// log(sum(exp(row))) with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean next-token negative log-likelihood of `targets` under `logits`.
pub fn loss(logits: &Tensor, targets: &[u32]) -> Result<f64, ModelError> {
    if targets.len() != logits.rows() {
        return Err(ModelError::Input(format!(
            "targets length {} does not match logits rows {}",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= logits.cols()) {
        return Err(ModelError::Input(format!("target id {bad} out of range")));
    }
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        total += log_sum_exp(row) - row[target as usize];
    }
    Ok(total / targets.len() as f64)
}

/// Greedy argmax decoding, deterministic; ties resolve to the lowest token
/// id. Context is clipped to the most recent `max_seq` tokens.
pub fn generate_greedy(
    params: &ModelParams,
    prompt: &[u32],
    max_new_tokens: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut tokens: Vec<u32> = prompt.to_vec();
    if tokens.is_empty() {
        return Err(ModelError::Input("empty prompt".into()));
    }
    for _ in 0..max_new_tokens {
        let start = tokens.len().saturating_sub(params.config.max_seq);
        let logits = forward(params, &tokens[start..])?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
    }
    Ok(tokens[prompt.len()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_model, ModelConfig};

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq: 16,
            seed: 3,
        }
    }

    #[test]
    fn forward_shape_matches_sequence() {
        let params = init_model(config()).unwrap();
        let logits = forward(&params, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(logits.shape(), (5, 256));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = init_model(config()).unwrap();
        assert!(matches!(forward(&params, &[300]), Err(ModelError::Input(_))));
        let long: Vec<u32> = (0..17).collect();
        assert!(matches!(forward(&params, &long), Err(ModelError::Input(_))));
        assert!(matches!(forward(&params, &[]), Err(ModelError::Input(_))));
    }

    #[test]
    fn zero_weights_give_position_constant_logits() {
        let mut params = init_model(config()).unwrap();
        for (id, tensor) in params.tensors_mut() {
            if id != "unembedding" {
                *tensor = tensor.zeros_like();
            }
        }
        let logits = forward(&params, &[3, 1, 4, 1, 5]).unwrap();
        for i in 1..logits.rows() {
            assert_eq!(logits.row(i), logits.row(0));
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let logits = Tensor::zeros(7, 256);
        let targets = vec![9; 7];
        let l = loss(&logits, &targets).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut logits = Tensor::zeros(3, 16);
        for i in 0..3 {
            *logits.at_mut(i, 5) = 1e4;
        }
        let l = loss(&logits, &[5, 5, 5]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_rejects_length_mismatch() {
        let logits = Tensor::zeros(3, 16);
        assert!(matches!(loss(&logits, &[1, 2]), Err(ModelError::Input(_))));
    }

    #[test]
    fn causality_later_tokens_cannot_touch_earlier_logits() {
        let params = init_model(config()).unwrap();
        let base = forward(&params, &[1, 2, 3, 4, 5, 6]).unwrap();
        let perturbed = forward(&params, &[1, 2, 3, 9, 5, 6]).unwrap();
        for i in 0..3 {
            for c in 0..base.cols() {
                assert_eq!(base.at(i, c).to_bits(), perturbed.at(i, c).to_bits());
            }
        }
        assert!(base.row(3) != perturbed.row(3));
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let params = init_model(config()).unwrap();
        let a = generate_greedy(&params, &[1, 2, 3], 8).unwrap();
        let b = generate_greedy(&params, &[1, 2, 3], 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }
}
