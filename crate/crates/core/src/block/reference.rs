//! Monolithic block oracle: unchunked projections, reference attention,
//! unchunked FFN and loss head, single rank, full sequence. The chunked
//! distributed path is verified against these.

use crate::attention::{attention_reference, attention_reference_backward};
use crate::block::{gelu, gelu_prime, BlockWeights};
use crate::error::{Error, Result};
use crate::tensor::{matmul, ChunkTensor, Dims, Layout, Matrix};

/// Forward intermediates kept for the analytic backward.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x: ChunkTensor,
    pub q: ChunkTensor,
    pub k: ChunkTensor,
    pub v: ChunkTensor,
    pub attn: ChunkTensor,
    pub r1: Matrix,
    pub z1: Matrix,
    pub a1: Matrix,
}

/// Weight gradients of one block.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub d_wqkv: Matrix,
    pub d_wo: Matrix,
    pub d_wffn1: Matrix,
    pub d_wffn2: Matrix,
}

impl BlockGrads {
    pub fn zeros(w: &BlockWeights) -> Self {
        BlockGrads {
            d_wqkv: Matrix::zeros(w.wqkv.rows, w.wqkv.cols),
            d_wo: Matrix::zeros(w.wo.rows, w.wo.cols),
            d_wffn1: Matrix::zeros(w.wffn1.rows, w.wffn1.cols),
            d_wffn2: Matrix::zeros(w.wffn2.rows, w.wffn2.cols),
        }
    }

    pub fn add_assign(&mut self, other: &BlockGrads) -> Result<()> {
        self.d_wqkv.add_assign(&other.d_wqkv)?;
        self.d_wo.add_assign(&other.d_wo)?;
        self.d_wffn1.add_assign(&other.d_wffn1)?;
        self.d_wffn2.add_assign(&other.d_wffn2)?;
        Ok(())
    }
}

pub(crate) fn split_qkv(
    qkv: &Matrix,
    dims: Dims,
    layout: Layout,
) -> Result<(ChunkTensor, ChunkTensor, ChunkTensor)> {
    let d_model = dims.h * dims.d;
    let q = ChunkTensor::from_matrix(&qkv.slice_cols(0, d_model), dims, layout)?;
    let k = ChunkTensor::from_matrix(&qkv.slice_cols(d_model, d_model), dims, layout)?;
    let v = ChunkTensor::from_matrix(&qkv.slice_cols(2 * d_model, d_model), dims, layout)?;
    Ok((q, k, v))
}

/// Single-rank reference forward over the full sequence.
pub fn block_reference_forward(x: &ChunkTensor, w: &BlockWeights) -> Result<ChunkTensor> {
    Ok(block_reference_forward_cached(x, w)?.0)
}

pub fn block_reference_forward_cached(
    x: &ChunkTensor,
    w: &BlockWeights,
) -> Result<(ChunkTensor, BlockCache)> {
    w.validate()?;
    let dims = x.dims;
    if dims.h * dims.d != w.hidden() {
        return Err(Error::DimMismatch(format!(
            "hidden {} != heads*head_dim {}",
            w.hidden(),
            dims.h * dims.d
        )));
    }
    let x_m = x.to_matrix();
    let qkv = matmul(&x_m, &w.wqkv)?;
    let (q, k, v) = split_qkv(&qkv, dims, Layout::SeqGlobalHeadsLocal)?;
    let attn = attention_reference(&q, &k, &v, true)?;
    let ao = matmul(&attn.to_matrix(), &w.wo)?;
    let r1 = x_m.add(&ao)?;
    let z1 = matmul(&r1, &w.wffn1)?;
    let mut a1 = z1.clone();
    for v in &mut a1.data {
        *v = gelu(*v);
    }
    let f2 = matmul(&a1, &w.wffn2)?;
    let out_m = r1.add(&f2)?;
    let out = ChunkTensor::from_matrix(&out_m, dims, x.layout)?;
    Ok((
        out,
        BlockCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            r1,
            z1,
            a1,
        },
    ))
}

/// Analytic backward of [`block_reference_forward`]. Returns the input
/// gradient and the weight gradients.
pub fn block_reference_backward(
    cache: &BlockCache,
    w: &BlockWeights,
    d_out: &ChunkTensor,
) -> Result<(ChunkTensor, BlockGrads)> {
    let dims = cache.x.dims;
    if d_out.dims != dims {
        return Err(Error::DimMismatch("d_out shape mismatch".into()));
    }
    let g = d_out.to_matrix();

    // out = r1 + gelu(r1·W1)·W2
    let d_a1 = matmul(&g, &w.wffn2.transpose())?;
    let d_wffn2 = matmul(&cache.a1.transpose(), &g)?;
    let mut d_z1 = d_a1;
    for (dz, z) in d_z1.data.iter_mut().zip(cache.z1.data.iter()) {
        *dz *= gelu_prime(*z);
    }
    let d_wffn1 = matmul(&cache.r1.transpose(), &d_z1)?;
    let d_r1 = g.add(&matmul(&d_z1, &w.wffn1.transpose())?)?;

    // r1 = x + attn·Wo
    let d_wo = matmul(&cache.attn.to_matrix().transpose(), &d_r1)?;
    let d_attn_m = matmul(&d_r1, &w.wo.transpose())?;
    let d_attn = ChunkTensor::from_matrix(&d_attn_m, dims, cache.attn.layout)?;
    let (dq, dk, dv) =
        attention_reference_backward(&cache.q, &cache.k, &cache.v, &d_attn, true, None, 1)?;

    // qkv = x·Wqkv
    let d_model = dims.h * dims.d;
    let rows = dims.b * dims.s;
    let mut d_qkv = Matrix::zeros(rows, 3 * d_model);
    for (offset, grad) in [(0, &dq), (d_model, &dk), (2 * d_model, &dv)] {
        let gm = grad.to_matrix();
        for r in 0..rows {
            for c in 0..d_model {
                *d_qkv.at_mut(r, offset + c) = gm.at(r, c);
            }
        }
    }
    let d_wqkv = matmul(&cache.x.to_matrix().transpose(), &d_qkv)?;
    let d_x_m = d_r1.add(&matmul(&d_qkv, &w.wqkv.transpose())?)?;
    let d_x = ChunkTensor::from_matrix(&d_x_m, dims, cache.x.layout)?;

    Ok((
        d_x,
        BlockGrads {
            d_wqkv,
            d_wo,
            d_wffn1,
            d_wffn2,
        },
    ))
}

/// Loss-head result. `per_token` holds each token's cross-entropy in input
/// order; `loss` is their ordered sum divided by the token count used for
/// the mean. Keeping per-token values lets callers reorder partial results
/// into canonical global token order, which makes the distributed loss match
/// the monolithic one exactly.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub per_token: Vec<f64>,
    pub d_hidden: ChunkTensor,
    pub d_wvocab: Matrix,
}

/// Monolithic softmax cross-entropy: mean of per-token CE over all tokens,
/// with gradients for the hidden states and the vocab projection.
pub fn loss_reference(
    hidden: &ChunkTensor,
    wvocab: &Matrix,
    labels: &[usize],
) -> Result<LossOutput> {
    let dims = hidden.dims;
    let tokens = dims.b * dims.s;
    if labels.len() != tokens {
        return Err(Error::DimMismatch(format!(
            "{} labels for {tokens} tokens",
            labels.len()
        )));
    }
    let vocab = wvocab.cols;
    for &l in labels {
        if l >= vocab {
            return Err(Error::LabelOutOfRange { label: l, vocab });
        }
    }
    let h_m = hidden.to_matrix();
    let logits = matmul(&h_m, wvocab)?;
    let mut per_token = Vec::with_capacity(tokens);
    let mut d_logits = Matrix::zeros(tokens, vocab);
    let inv_t = 1.0 / tokens as f64;
    for r in 0..tokens {
        let row = &logits.data[r * vocab..(r + 1) * vocab];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in row {
            sum += (l - mx).exp();
        }
        let lse = mx + sum.ln();
        per_token.push(lse - row[labels[r]]);
        for c in 0..vocab {
            let p = (row[c] - mx).exp() / sum;
            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
            *d_logits.at_mut(r, c) = (p - onehot) * inv_t;
        }
    }
    let loss: f64 = per_token.iter().sum::<f64>() * inv_t;
    let d_hidden_m = matmul(&d_logits, &wvocab.transpose())?;
    let d_wvocab = matmul(&h_m.transpose(), &d_logits)?;
    Ok(LossOutput {
        loss,
        per_token,
        d_hidden: ChunkTensor::from_matrix(&d_hidden_m, dims, hidden.layout)?,
        d_wvocab,
    })
}
