//! Exact analytic gradients via reverse-mode differentiation of the
//! forward pass, double precision throughout.
//!
//! Batch loss is the mean over sequences of the per-sequence mean
//! next-token negative log-likelihood; masked positions carry zero weight.
//! Iteration order is fixed, so identical inputs give bit-identical
//! gradients.

use crate::tensor::Tensor;

use super::forward::{forward_trace, gelu_grad, log_sum_exp, BlockTrace, ForwardTrace, NormTrace};
use super::{BlockParams, GradientSet, ModelError, ModelParams, NormParams};

/// One training sequence: `tokens[..n-1]` are the inputs, `tokens[1..]` the
/// targets. An optional mask (length `tokens.len() - 1`, aligned with the
/// targets) selects which positions contribute to the loss; `None` means
/// all positions count.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Option<Vec<bool>>,
}

impl TrainExample {
    pub fn unmasked(tokens: Vec<u32>) -> Self {
        Self { tokens, loss_mask: None }
    }
}

/// LayerNorm backward for one activation tensor. Returns dx and
/// accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Tensor,
    x: &Tensor,
    trace: &NormTrace,
    norm: &NormParams,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let (rows, d) = x.shape();
    let gain = norm.gain.row(0);
    let mut dx = Tensor::zeros(rows, d);
    for r in 0..rows {
        let xrow = x.row(r);
        let dyrow = dy.row(r);
        let mean = trace.mean[r];
        let inv_std = trace.inv_std[r];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut dxhat = vec![0.0; d];
        for c in 0..d {
            let xhat = (xrow[c] - mean) * inv_std;
            *dgain.at_mut(0, c) += dyrow[c] * xhat;
            *dbias.at_mut(0, c) += dyrow[c];
            let dh = dyrow[c] * gain[c];
            dxhat[c] = dh;
            s1 += dh;
            s2 += dh * xhat;
        }
        let dxrow = dx.row_mut(r);
        for c in 0..d {
            let xhat = (xrow[c] - mean) * inv_std;
            dxrow[c] = inv_std * (dxhat[c] - s1 / d as f64 - xhat * s2 / d as f64);
        }
    }
    dx
}

/// Backward through one block; consumes d(x_out) and returns d(x_in).
fn block_backward(
    block: &BlockParams,
    trace: &BlockTrace,
    dx_out: Tensor,
    grads: &mut GradientSet,
    n_heads: usize,
) -> Tensor {
    let id = block.block_id;
    let (t_len, d) = trace.x_in.shape();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Feed-forward: x_out = x_mid + gelu(n2·win)·wout
    let dffn_act = dx_out.matmul_bt(&block.ffn_wout);
    grads
        .get_mut(&format!("block{id}.ffn_wout"))
        .unwrap()
        .add_assign(&trace.ffn_act.tmul(&dx_out));
    let mut dffn_pre = dffn_act;
    for (dv, pre) in dffn_pre.data_mut().iter_mut().zip(trace.ffn_pre.data()) {
        *dv *= gelu_grad(*pre);
    }
    grads
        .get_mut(&format!("block{id}.ffn_win"))
        .unwrap()
        .add_assign(&trace.n2.tmul(&dffn_pre));
    let dn2 = dffn_pre.matmul_bt(&block.ffn_win);

    let mut dx_mid = dx_out;
    {
        let (dgain, dbias) = (format!("block{id}.norm2.gain"), format!("block{id}.norm2.bias"));
        let mut g = grads.get(&dgain).unwrap().clone();
        let mut b = grads.get(&dbias).unwrap().clone();
        let dx = layer_norm_backward(&dn2, &trace.x_mid, &trace.n2_trace, &block.norm2, &mut g, &mut b);
        *grads.get_mut(&dgain).unwrap() = g;
        *grads.get_mut(&dbias).unwrap() = b;
        dx_mid.add_assign(&dx);
    }

    // Attention: x_mid = x_in + ctx·wo
    let dctx = dx_mid.matmul_bt(&block.attn_wo);
    grads
        .get_mut(&format!("block{id}.attn_wo"))
        .unwrap()
        .add_assign(&trace.ctx.tmul(&dx_mid));

    let mut dq = Tensor::zeros(t_len, d);
    let mut dk = Tensor::zeros(t_len, d);
    let mut dv = Tensor::zeros(t_len, d);
    for h in 0..n_heads {
        let off = h * head_dim;
        let weights = &trace.attn[h];
        for i in 0..t_len {
            let dctx_i = &dctx.row(i)[off..off + head_dim];
            // da over attended positions, then softmax backward to scores.
            let mut da = vec![0.0; i + 1];
            let mut dot = 0.0;
            for (j, daj) in da.iter_mut().enumerate() {
                let vj = &trace.v.row(j)[off..off + head_dim];
                *daj = dctx_i.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += weights.at(i, j) * *daj;
            }
            for (j, &daj) in da.iter().enumerate() {
                let ds = weights.at(i, j) * (daj - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &trace.k.row(j)[off..off + head_dim];
                let qi = &trace.q.row(i)[off..off + head_dim];
                let dqrow = &mut dq.row_mut(i)[off..off + head_dim];
                for (c, &kv) in kj.iter().enumerate() {
                    dqrow[c] += ds * kv;
                }
                let dkrow = &mut dk.row_mut(j)[off..off + head_dim];
                for (c, &qv) in qi.iter().enumerate() {
                    dkrow[c] += ds * qv;
                }
            }
            for j in 0..=i {
                let w = weights.at(i, j);
                if w == 0.0 {
                    continue;
                }
                let dvrow = &mut dv.row_mut(j)[off..off + head_dim];
                for (c, &dc) in dctx_i.iter().enumerate() {
                    dvrow[c] += w * dc;
                }
            }
        }
    }

    grads.get_mut(&format!("block{id}.attn_wq")).unwrap().add_assign(&trace.n1.tmul(&dq));
    grads.get_mut(&format!("block{id}.attn_wk")).unwrap().add_assign(&trace.n1.tmul(&dk));
    grads.get_mut(&format!("block{id}.attn_wv")).unwrap().add_assign(&trace.n1.tmul(&dv));

    let mut dn1 = dq.matmul_bt(&block.attn_wq);
    dn1.add_assign(&dk.matmul_bt(&block.attn_wk));
    dn1.add_assign(&dv.matmul_bt(&block.attn_wv));

    let mut dx_in = dx_mid;
    {
        let (dgain, dbias) = (format!("block{id}.norm1.gain"), format!("block{id}.norm1.bias"));
        let mut g = grads.get(&dgain).unwrap().clone();
        let mut b = grads.get(&dbias).unwrap().clone();
        let dx = layer_norm_backward(&dn1, &trace.x_in, &trace.n1_trace, &block.norm1, &mut g, &mut b);
        *grads.get_mut(&dgain).unwrap() = g;
        *grads.get_mut(&dbias).unwrap() = b;
        dx_in.add_assign(&dx);
    }
    dx_in
}

/// Loss and gradient contribution of a single sequence. Each sequence gets
/// its own gradient set; the batch reduction adds whole tensors once per
/// sequence in order, which keeps the mean exact under duplication.
fn sequence_backward(
    params: &ModelParams,
    example: &TrainExample,
) -> Result<(f64, GradientSet), ModelError> {
    let mut grads = GradientSet::zeros_like(params);
    let grads = &mut grads;
    let tokens = &example.tokens;
    if tokens.len() < 2 {
        return Err(ModelError::Input(
            "training sequence needs at least two tokens".into(),
        ));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    if let Some(mask) = &example.loss_mask {
        if mask.len() != targets.len() {
            return Err(ModelError::Input(format!(
                "loss mask length {} does not match target count {}",
                mask.len(),
                targets.len()
            )));
        }
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= params.config.vocab_size) {
        return Err(ModelError::Input(format!("target id {bad} out of range")));
    }

    let unmasked = example
        .loss_mask
        .as_ref()
        .map(|m| m.iter().filter(|&&b| b).count())
        .unwrap_or(targets.len());
    if unmasked == 0 {
        return Ok((0.0, std::mem::take(grads)));
    }
    let weight = 1.0 / unmasked as f64;

    let trace: ForwardTrace = forward_trace(params, inputs)?;
    let logits = &trace.logits;
    let vocab = logits.cols();

    let mut seq_loss = 0.0;
    let mut dlogits = Tensor::zeros(logits.rows(), vocab);
    for (i, &target) in targets.iter().enumerate() {
        let masked_out = example
            .loss_mask
            .as_ref()
            .map(|m| !m[i])
            .unwrap_or(false);
        if masked_out {
            continue;
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        seq_loss += weight * (lse - row[target as usize]);
        let drow = dlogits.row_mut(i);
        for (c, &logit) in row.iter().enumerate() {
            drow[c] = weight * (logit - lse).exp();
        }
        drow[target as usize] -= weight;
    }

    grads
        .get_mut("unembedding")
        .unwrap()
        .add_assign(&trace.nf.tmul(&dlogits));
    let dnf = dlogits.matmul_bt(&params.unembedding);

    let mut dgain = grads.get("final_norm.gain").unwrap().clone();
    let mut dbias = grads.get("final_norm.bias").unwrap().clone();
    let mut dx = layer_norm_backward(
        &dnf,
        &trace.x_final,
        &trace.nf_trace,
        &params.final_norm,
        &mut dgain,
        &mut dbias,
    );
    *grads.get_mut("final_norm.gain").unwrap() = dgain;
    *grads.get_mut("final_norm.bias").unwrap() = dbias;

    for (block, btrace) in params.blocks.iter().zip(&trace.blocks).rev() {
        dx = block_backward(block, btrace, dx, grads, params.config.n_heads);
    }

    let demb = grads.get_mut("embedding").unwrap();
    for (i, &tok) in inputs.iter().enumerate() {
        let drow = dx.row(i);
        let erow = demb.row_mut(tok as usize);
        for (e, d) in erow.iter_mut().zip(drow) {
            *e += d;
        }
    }
    Ok((seq_loss, std::mem::take(grads)))
}

/// Mean loss over the batch and its exact gradient.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &[TrainExample],
) -> Result<(f64, GradientSet), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Input("empty batch".into()));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut total = 0.0;
    for example in batch {
        let (seq_loss, seq_grads) = sequence_backward(params, example)?;
        total += seq_loss;
        grads.accumulate(&seq_grads);
    }
    let inv_b = 1.0 / batch.len() as f64;
    grads.scale(inv_b);
    Ok((total * inv_b, grads))
}

/// Gradient of the mean next-token loss over unmasked token sequences.
pub fn gradients(params: &ModelParams, batch: &[Vec<u32>]) -> Result<GradientSet, ModelError> {
    let examples: Vec<TrainExample> = batch
        .iter()
        .map(|tokens| TrainExample::unmasked(tokens.clone()))
        .collect();
    Ok(loss_and_gradients(params, &examples)?.1)
}

/// Gradient with per-position loss masks (SFT-style output-only loss).
pub fn gradients_masked(
    params: &ModelParams,
    batch: &[TrainExample],
) -> Result<GradientSet, ModelError> {
    Ok(loss_and_gradients(params, batch)?.1)
}
