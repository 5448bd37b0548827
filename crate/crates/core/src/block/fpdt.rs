//! Chunked, distributed execution of one transformer block.
//!
//! Forward, per sequence chunk: slice the local hidden state, project to
//! q/k/v, Alltoall to scatter heads and gather the chunk's full token range,
//! run online attention against the KV chunks cached in the host store,
//! Alltoall the attention output back, apply the output projection and
//! residual, then the FFN at twice the attention chunk granularity. The
//! hidden slice, attention inputs/outputs, and FFN input are offloaded to
//! the per-rank store as they finish, so the backward pass can fetch them
//! without re-running the forward.
//!
//! Backward: first the FFN and output-projection gradients for every chunk
//! (producing the upstream attention gradients), then the nested-loop
//! attention backward, advancing all ranks epoch by epoch; at the end of
//! epoch `j` chunk `j`'s dq/dk/dv are final and go through the reverse
//! Alltoall into the projection backward, which consumes the prefetched
//! hidden slice.
//!
//! Ranks execute phases in lockstep; each rank appends to an op trace, and
//! trace equality across ranks is what the SPMD uniformity tests assert.

use crate::attention::{BackwardAudit, ChunkedAttentionBwd, ChunkedAttentionFwd, SavedForward};
use crate::block::reference::{split_qkv, BlockGrads};
use crate::block::{gelu, gelu_prime, BlockWeights, ChunkPlanExec, HbmLedger};
use crate::error::{Error, Result};
use crate::layout::{alltoall_gather_heads, alltoall_scatter_heads, RankGroup};
use crate::store::{OfflStore, Payload, Role, StoreKey};
use crate::tensor::{matmul, ChunkTensor, Dims, Layout, Matrix};

/// One lockstep trace entry: which phase ran for which chunk index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOp {
    pub phase: &'static str,
    pub chunk: usize,
}

/// Per-rank outputs and saved state of the chunked forward.
#[derive(Debug)]
pub struct FpdtBlockOutput {
    /// Per-rank local block output, `[b, s_local, h, d]`.
    pub outputs: Vec<ChunkTensor>,
    pub saved: FpdtSaved,
    /// Per-rank lockstep op traces; identical across ranks.
    pub traces: Vec<Vec<TraceOp>>,
}

/// Saved-state descriptor for the block backward. The tensors themselves
/// live in the per-rank stores.
#[derive(Debug, Clone)]
pub struct FpdtSaved {
    pub layer: usize,
    pub p: usize,
    pub plan: ChunkPlanExec,
    pub attn_saved: Vec<SavedForward>,
    /// Local per-chunk hidden dims `[b, s_local/u, h_global, d]`.
    pub local_chunk_dims: Dims,
}

/// Per-rank results of the block backward.
#[derive(Debug)]
pub struct FpdtBackwardOutput {
    /// Per-rank gradient of the local hidden input, `[b, s_local, h, d]`.
    pub d_hidden: Vec<ChunkTensor>,
    /// Per-rank weight-gradient partials (data-parallel semantics: sum them
    /// with [`reduce_block_grads`]).
    pub grads: Vec<BlockGrads>,
    pub audits: Vec<BackwardAudit>,
    pub traces: Vec<Vec<TraceOp>>,
}

/// Sum per-rank weight gradients in rank order.
pub fn reduce_block_grads(parts: &[BlockGrads], w: &BlockWeights) -> Result<BlockGrads> {
    let mut total = BlockGrads::zeros(w);
    for p in parts {
        total.add_assign(p)?;
    }
    Ok(total)
}

/// FFN applied to a row range in `pieces` sub-chunks. Token-wise, so the
/// piece boundaries cannot change the result; they only bound the transient
/// buffer size.
fn ffn_pieces(
    x: &Matrix,
    w: &BlockWeights,
    pieces: usize,
    mut ledger: Option<&mut HbmLedger>,
) -> Result<Matrix> {
    let rows = x.rows;
    let pieces = pieces.clamp(1, rows.max(1));
    let mut out = Matrix::zeros(rows, w.hidden());
    let per = rows.div_ceil(pieces);
    let mut r0 = 0;
    while r0 < rows {
        let n = per.min(rows - r0);
        let mut xp = Matrix::zeros(n, x.cols);
        xp.data.copy_from_slice(&x.data[r0 * x.cols..(r0 + n) * x.cols]);
        let transient = (2 * n * w.ffn_dim() + n * w.hidden()) as u64 * 8;
        if let Some(l) = ledger.as_deref_mut() {
            l.alloc(transient);
        }
        let z1 = matmul(&xp, &w.wffn1)?;
        let mut a1 = z1;
        for v in &mut a1.data {
            *v = gelu(*v);
        }
        let f2 = matmul(&a1, &w.wffn2)?;
        out.data[r0 * w.hidden()..(r0 + n) * w.hidden()].copy_from_slice(&f2.data);
        if let Some(l) = ledger.as_deref_mut() {
            l.free(transient);
        }
        r0 += n;
    }
    Ok(out)
}

/// FFN backward for a row range in `pieces` sub-chunks, recomputing the
/// per-piece activations from the fetched FFN input. Returns d_input and
/// accumulates the weight gradients.
fn ffn_backward_pieces(
    x: &Matrix,
    g: &Matrix,
    w: &BlockWeights,
    pieces: usize,
    d_wffn1: &mut Matrix,
    d_wffn2: &mut Matrix,
    mut ledger: Option<&mut HbmLedger>,
) -> Result<Matrix> {
    let rows = x.rows;
    let pieces = pieces.clamp(1, rows.max(1));
    let mut d_x = Matrix::zeros(rows, x.cols);
    let per = rows.div_ceil(pieces);
    let mut r0 = 0;
    while r0 < rows {
        let n = per.min(rows - r0);
        let mut xp = Matrix::zeros(n, x.cols);
        xp.data.copy_from_slice(&x.data[r0 * x.cols..(r0 + n) * x.cols]);
        let mut gp = Matrix::zeros(n, g.cols);
        gp.data.copy_from_slice(&g.data[r0 * g.cols..(r0 + n) * g.cols]);
        let transient = (4 * n * w.ffn_dim() + n * w.hidden()) as u64 * 8;
        if let Some(l) = ledger.as_deref_mut() {
            l.alloc(transient);
        }
        let z1 = matmul(&xp, &w.wffn1)?;
        let mut a1 = z1.clone();
        for v in &mut a1.data {
            *v = gelu(*v);
        }
        let d_a1 = matmul(&gp, &w.wffn2.transpose())?;
        d_wffn2.add_assign(&matmul(&a1.transpose(), &gp)?)?;
        let mut d_z1 = d_a1;
        for (dz, z) in d_z1.data.iter_mut().zip(z1.data.iter()) {
            *dz *= gelu_prime(*z);
        }
        d_wffn1.add_assign(&matmul(&xp.transpose(), &d_z1)?)?;
        let d_xp = matmul(&d_z1, &w.wffn1.transpose())?;
        d_x.data[r0 * x.cols..(r0 + n) * x.cols].copy_from_slice(&d_xp.data);
        if let Some(l) = ledger.as_deref_mut() {
            l.free(transient);
        }
        r0 += n;
    }
    Ok(d_x)
}

/// Chunked FFN over hidden chunks: `u_ffn` sub-chunks spread across the
/// chunk list. Concatenation equals the monolithic FFN exactly (token-wise
/// op, fixed summation order).
pub fn chunked_ffn(
    chunks: &[ChunkTensor],
    w: &BlockWeights,
    u_ffn: usize,
    mut ledger: Option<&mut HbmLedger>,
) -> Result<Vec<ChunkTensor>> {
    if chunks.is_empty() || u_ffn == 0 || u_ffn % chunks.len() != 0 {
        return Err(Error::Divisibility {
            what: "u_ffn",
            value: u_ffn,
            by: chunks.len().max(1),
        });
    }
    let factor = u_ffn / chunks.len();
    let mut out = Vec::with_capacity(chunks.len());
    for c in chunks {
        if c.dims.s % factor != 0 {
            return Err(Error::Divisibility {
                what: "chunk token count",
                value: c.dims.s,
                by: factor,
            });
        }
        let f2 = ffn_pieces(&c.to_matrix(), w, factor, ledger.as_deref_mut())?;
        out.push(ChunkTensor::from_matrix(&f2, c.dims, c.layout)?);
    }
    Ok(out)
}

/// Chunked loss-head result.
#[derive(Debug, Clone)]
pub struct ChunkedLossOutput {
    pub loss: f64,
    /// Per-token CE in input (chunk-concatenation) order.
    pub per_token: Vec<f64>,
    pub d_hidden_chunks: Vec<ChunkTensor>,
    pub d_wvocab: Matrix,
}

/// Softmax cross-entropy over hidden chunks, computed `u_loss` token pieces
/// at a time so the logits buffer never exceeds `ceil(T/u_loss) * vocab`
/// elements. `total_tokens_for_mean` scales the mean and the gradients; in
/// the distributed setting it is the global token count while each rank
/// passes only its local chunks.
pub fn chunked_loss_head(
    hidden_chunks: &[ChunkTensor],
    wvocab: &Matrix,
    labels: &[usize],
    u_loss: usize,
    total_tokens_for_mean: usize,
    mut ledger: Option<&mut HbmLedger>,
) -> Result<ChunkedLossOutput> {
    let first = hidden_chunks
        .first()
        .ok_or_else(|| Error::DimMismatch("no hidden chunks".into()))?;
    let d_model = first.dims.h * first.dims.d;
    if wvocab.rows != d_model {
        return Err(Error::DimMismatch("wvocab rows != hidden".into()));
    }
    let vocab = wvocab.cols;
    let tokens: usize = hidden_chunks.iter().map(|c| c.dims.b * c.dims.s).sum();
    if labels.len() != tokens {
        return Err(Error::DimMismatch(format!(
            "{} labels for {tokens} tokens",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= vocab {
            return Err(Error::LabelOutOfRange { label: l, vocab });
        }
    }
    if total_tokens_for_mean == 0 {
        return Err(Error::DimMismatch("zero total token count".into()));
    }

    // Concatenate hidden rows; D-sized, so no vocab-scale spike here.
    let mut h_all = Matrix::zeros(tokens, d_model);
    let mut row = 0;
    for c in hidden_chunks {
        let m = c.to_matrix();
        h_all.data[row * d_model..(row + m.rows) * d_model].copy_from_slice(&m.data);
        row += m.rows;
    }

    let u_loss = u_loss.clamp(1, tokens);
    let per = tokens.div_ceil(u_loss);
    let inv_t = 1.0 / total_tokens_for_mean as f64;
    let mut per_token = Vec::with_capacity(tokens);
    let mut d_hidden = Matrix::zeros(tokens, d_model);
    let mut d_wvocab = Matrix::zeros(d_model, vocab);
    let mut r0 = 0;
    while r0 < tokens {
        let n = per.min(tokens - r0);
        let mut hp = Matrix::zeros(n, d_model);
        hp.data.copy_from_slice(&h_all.data[r0 * d_model..(r0 + n) * d_model]);
        let logits_bytes = (n * vocab) as u64 * 8;
        if let Some(l) = ledger.as_deref_mut() {
            l.alloc(logits_bytes);
        }
        let logits = matmul(&hp, wvocab)?;
        let mut d_logits = Matrix::zeros(n, vocab);
        for r in 0..n {
            let lrow = &logits.data[r * vocab..(r + 1) * vocab];
            let mx = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in lrow {
                sum += (x - mx).exp();
            }
            let lse = mx + sum.ln();
            let label = labels[r0 + r];
            per_token.push(lse - lrow[label]);
            for c in 0..vocab {
                let prob = (lrow[c] - mx).exp() / sum;
                let onehot = if c == label { 1.0 } else { 0.0 };
                *d_logits.at_mut(r, c) = (prob - onehot) * inv_t;
            }
        }
        let d_hp = matmul(&d_logits, &wvocab.transpose())?;
        d_hidden.data[r0 * d_model..(r0 + n) * d_model].copy_from_slice(&d_hp.data);
        d_wvocab.add_assign(&matmul(&hp.transpose(), &d_logits)?)?;
        if let Some(l) = ledger.as_deref_mut() {
            l.free(logits_bytes);
        }
        r0 += n;
    }
    let loss: f64 = per_token.iter().sum::<f64>() * inv_t;

    // Re-split d_hidden along the input chunk boundaries.
    let mut d_chunks = Vec::with_capacity(hidden_chunks.len());
    let mut r0 = 0;
    for c in hidden_chunks {
        let n = c.dims.b * c.dims.s;
        let mut m = Matrix::zeros(n, d_model);
        m.data.copy_from_slice(&d_hidden.data[r0 * d_model..(r0 + n) * d_model]);
        d_chunks.push(ChunkTensor::from_matrix(&m, c.dims, c.layout)?);
        r0 += n;
    }
    Ok(ChunkedLossOutput {
        loss,
        per_token,
        d_hidden_chunks: d_chunks,
        d_wvocab,
    })
}

fn tensor_bytes(dims: Dims) -> u64 {
    dims.len() as u64 * 8
}

/// Chunked distributed block forward over a shuffled rank group. Inputs
/// must already carry the rank-ordinal shuffle (see [`RankGroup`]).
pub fn fpdt_block_forward(
    group: &RankGroup,
    w: &BlockWeights,
    plan: &ChunkPlanExec,
    stores: &mut [OfflStore],
    ledger: &mut HbmLedger,
    layer: usize,
) -> Result<FpdtBlockOutput> {
    w.validate()?;
    let p = group.p;
    let u = plan.u_attn;
    if stores.len() != p {
        return Err(Error::DimMismatch(format!(
            "{} stores for {p} ranks",
            stores.len()
        )));
    }
    let local_dims = group.local[0].dims;
    if local_dims.h * local_dims.d != w.hidden() {
        return Err(Error::DimMismatch("hidden != heads*head_dim".into()));
    }
    if local_dims.h % p != 0 {
        return Err(Error::Divisibility {
            what: "head count",
            value: local_dims.h,
            by: p,
        });
    }
    if u == 0 || local_dims.s % u != 0 {
        return Err(Error::Divisibility {
            what: "local tokens",
            value: local_dims.s,
            by: u.max(1),
        });
    }
    if plan.u_ffn % plan.u_attn != 0 {
        return Err(Error::Divisibility {
            what: "u_ffn",
            value: plan.u_ffn,
            by: plan.u_attn,
        });
    }
    let c_loc = local_dims.s / u;
    let chunk_dims = Dims::new(local_dims.b, c_loc, local_dims.h, local_dims.d);
    let chunk_bytes = tensor_bytes(chunk_dims);
    let c_glob = p * c_loc;
    let h_local = local_dims.h / p;
    let scores_bytes = (local_dims.b * h_local * c_glob * c_glob) as u64 * 8;
    let ffn_factor = plan.u_ffn / plan.u_attn;

    let mut drivers: Vec<ChunkedAttentionFwd> = (0..p)
        .map(|_| ChunkedAttentionFwd::new(layer, u, None, false))
        .collect();
    let mut out_chunks: Vec<Vec<ChunkTensor>> = vec![Vec::with_capacity(u); p];
    let mut traces: Vec<Vec<TraceOp>> = vec![Vec::new(); p];

    for i in 0..u {
        // QKV projection on the local slice, then offload the hidden chunk
        // (its device copy stays alive through the residual add below).
        ledger.set_phase("fwd:proj");
        ledger.alloc(chunk_bytes + 3 * chunk_bytes);
        let mut x_chunks = Vec::with_capacity(p);
        let mut q_loc = Vec::with_capacity(p);
        let mut k_loc = Vec::with_capacity(p);
        let mut v_loc = Vec::with_capacity(p);
        for r in 0..p {
            let x = group.local[r].slice_seq(i * c_loc, c_loc)?;
            let qkv = matmul(&x.to_matrix(), &w.wqkv)?;
            let (q, k, v) = split_qkv(&qkv, chunk_dims, Layout::SeqLocalHeadsGlobal)?;
            stores[r].offload(StoreKey::new(layer, i, Role::Hidden), Payload::Tensor(x.clone()))?;
            x_chunks.push(x);
            q_loc.push(q);
            k_loc.push(k);
            v_loc.push(v);
            traces[r].push(TraceOp { phase: "fwd:proj", chunk: i });
        }

        // Alltoall: scatter heads, gather the chunk's token range. Receive
        // buffers are fresh allocations; send buffers die afterwards.
        ledger.set_phase("fwd:a2a");
        ledger.alloc(3 * chunk_bytes);
        let q_hat = alltoall_scatter_heads(&q_loc)?;
        let k_hat = alltoall_scatter_heads(&k_loc)?;
        let v_hat = alltoall_scatter_heads(&v_loc)?;
        drop(q_loc);
        drop(k_loc);
        drop(v_loc);
        ledger.free(3 * chunk_bytes);
        for r in 0..p {
            traces[r].push(TraceOp { phase: "fwd:a2a_scatter", chunk: i });
        }

        // Online attention against cached KV chunks. The fetched pair, the
        // score block, and the output accumulator are the live transients;
        // q/k/v move to the host when the chunk finishes.
        ledger.set_phase("fwd:attn");
        ledger.alloc(2 * chunk_bytes + scores_bytes + chunk_bytes);
        let mut o_hat = Vec::with_capacity(p);
        for (r, ((q, k), v)) in q_hat.into_iter().zip(k_hat).zip(v_hat).enumerate() {
            o_hat.push(drivers[r].process_chunk(q, k, v, &mut stores[r])?);
            traces[r].push(TraceOp { phase: "fwd:attn", chunk: i });
        }
        ledger.free(2 * chunk_bytes + scores_bytes);
        ledger.free(3 * chunk_bytes);

        // Alltoall back, then park the scattered attention output on the
        // host for the backward pass.
        ledger.set_phase("fwd:a2a");
        ledger.alloc(chunk_bytes);
        let o_loc = alltoall_gather_heads(&o_hat)?;
        for (r, o) in o_hat.into_iter().enumerate() {
            stores[r].offload(StoreKey::new(layer, i, Role::AttnOut), Payload::Tensor(o))?;
            traces[r].push(TraceOp { phase: "fwd:a2a_gather", chunk: i });
        }
        ledger.free(chunk_bytes);

        // Output projection + residual; offload the FFN input.
        ledger.set_phase("fwd:out_proj");
        ledger.alloc(chunk_bytes);
        let mut r1_chunks = Vec::with_capacity(p);
        for (r, o) in o_loc.into_iter().enumerate() {
            let r1_m = x_chunks[r].to_matrix().add(&matmul(&o.to_matrix(), &w.wo)?)?;
            let r1 = ChunkTensor::from_matrix(&r1_m, chunk_dims, Layout::SeqLocalHeadsGlobal)?;
            stores[r].offload(StoreKey::new(layer, i, Role::FfnIn), Payload::Tensor(r1.clone()))?;
            r1_chunks.push(r1);
            traces[r].push(TraceOp { phase: "fwd:out_proj", chunk: i });
        }
        drop(x_chunks);
        ledger.free(2 * chunk_bytes); // o_loc and the hidden slice retire here

        // FFN at u_ffn granularity, then the second residual.
        ledger.set_phase("fwd:ffn");
        ledger.alloc(chunk_bytes);
        for (r, r1) in r1_chunks.into_iter().enumerate() {
            let f2 = ffn_pieces(
                &r1.to_matrix(),
                w,
                ffn_factor,
                if r == 0 { Some(&mut *ledger) } else { None },
            )?;
            let out_m = r1.to_matrix().add(&f2)?;
            out_chunks[r].push(ChunkTensor::from_matrix(&out_m, chunk_dims, Layout::SeqLocalHeadsGlobal)?);
            traces[r].push(TraceOp { phase: "fwd:ffn", chunk: i });
        }
        ledger.free(chunk_bytes);
    }

    let outputs: Vec<ChunkTensor> = out_chunks
        .iter()
        .map(|cs| ChunkTensor::concat_seq(cs))
        .collect::<Result<_>>()?;
    let attn_saved: Vec<SavedForward> = drivers
        .into_iter()
        .map(|d| d.finish())
        .collect::<Result<_>>()?;

    Ok(FpdtBlockOutput {
        outputs,
        saved: FpdtSaved {
            layer,
            p,
            plan: *plan,
            attn_saved,
            local_chunk_dims: chunk_dims,
        },
        traces,
    })
}

/// Chunked distributed block backward. `d_out_local` is per-rank, shaped
/// like the forward outputs.
pub fn fpdt_block_backward(
    saved: &FpdtSaved,
    w: &BlockWeights,
    d_out_local: &[ChunkTensor],
    stores: &mut [OfflStore],
    ledger: &mut HbmLedger,
) -> Result<FpdtBackwardOutput> {
    let p = saved.p;
    let u = saved.plan.u_attn;
    let layer = saved.layer;
    if d_out_local.len() != p || stores.len() != p {
        return Err(Error::DimMismatch("rank count mismatch in backward".into()));
    }
    let chunk_dims = saved.local_chunk_dims;
    for g in d_out_local {
        if g.dims.s != chunk_dims.s * u || g.dims.b != chunk_dims.b || g.dims.h != chunk_dims.h {
            return Err(Error::DimMismatch("d_out shape mismatch".into()));
        }
    }
    let c_loc = chunk_dims.s;
    let d_model = chunk_dims.h * chunk_dims.d;
    let chunk_bytes = tensor_bytes(chunk_dims);
    let ffn_factor = saved.plan.u_ffn / saved.plan.u_attn;

    let mut grads: Vec<BlockGrads> = (0..p).map(|_| BlockGrads::zeros(w)).collect();
    let mut traces: Vec<Vec<TraceOp>> = vec![Vec::new(); p];
    // Per rank, per chunk: accumulated gradient of the hidden input slice.
    let mut d_x: Vec<Vec<Matrix>> =
        vec![(0..u).map(|_| Matrix::zeros(chunk_dims.b * c_loc, d_model)).collect(); p];

    // FFN and output-projection gradients first, chunk by chunk. This
    // produces the scattered upstream attention gradients, parked in the
    // store until the nested attention backward consumes them.
    for i in 0..u {
        ledger.set_phase("bwd:ffn");
        ledger.alloc(3 * chunk_bytes); // d_out slice, fetched FFN input, d_r1
        let mut d_ao: Vec<Matrix> = Vec::with_capacity(p);
        for r in 0..p {
            let g = d_out_local[r].slice_seq(i * c_loc, c_loc)?.to_matrix();
            let r1_key = StoreKey::new(layer, i, Role::FfnIn);
            let r1 = stores[r].fetch(r1_key)?.into_tensor()?;
            let gr = &mut grads[r];
            let d_ffn_in = ffn_backward_pieces(
                &r1.to_matrix(),
                &g,
                w,
                ffn_factor,
                &mut gr.d_wffn1,
                &mut gr.d_wffn2,
                if r == 0 { Some(&mut *ledger) } else { None },
            )?;
            stores[r].release(r1_key)?;
            stores[r].free(r1_key)?;
            let d_r1 = g.add(&d_ffn_in)?;
            d_x[r][i].add_assign(&d_r1)?;
            d_ao.push(d_r1);
            traces[r].push(TraceOp { phase: "bwd:ffn", chunk: i });
        }

        // Output projection: fetch the scattered attention output, gather it
        // (the one extra Alltoall of this artifact's backward), take the
        // weight gradient, and scatter the upstream attention gradient.
        ledger.set_phase("bwd:out_proj");
        ledger.alloc(2 * chunk_bytes);
        let o_key = StoreKey::new(layer, i, Role::AttnOut);
        let o_hat: Vec<ChunkTensor> = (0..p)
            .map(|r| stores[r].fetch(o_key)?.into_tensor())
            .collect::<Result<_>>()?;
        let o_loc = alltoall_gather_heads(&o_hat)?;
        for r in 0..p {
            stores[r].release(o_key)?;
        }
        drop(o_hat);
        let mut d_o_loc = Vec::with_capacity(p);
        for r in 0..p {
            grads[r].d_wo.add_assign(&matmul(&o_loc[r].to_matrix().transpose(), &d_ao[r])?)?;
            let d_o = matmul(&d_ao[r], &w.wo.transpose())?;
            d_o_loc.push(ChunkTensor::from_matrix(&d_o, chunk_dims, Layout::SeqLocalHeadsGlobal)?);
            traces[r].push(TraceOp { phase: "bwd:out_proj", chunk: i });
        }
        let d_o_hat = alltoall_scatter_heads(&d_o_loc)?;
        for (r, t) in d_o_hat.into_iter().enumerate() {
            stores[r].offload(StoreKey::new(layer, i, Role::DAttnOut), Payload::Tensor(t))?;
            traces[r].push(TraceOp { phase: "bwd:a2a", chunk: i });
        }
        ledger.free(5 * chunk_bytes);
    }

    // Nested-loop attention backward, all ranks advancing epoch by epoch.
    let hat_dims = saved.attn_saved[0].chunk_dims;
    let mut steppers: Vec<ChunkedAttentionBwd> = Vec::with_capacity(p);
    for r in 0..p {
        let mut o_chunks = Vec::with_capacity(u);
        let mut do_chunks = Vec::with_capacity(u);
        for i in 0..u {
            let ok = StoreKey::new(layer, i, Role::AttnOut);
            let dk = StoreKey::new(layer, i, Role::DAttnOut);
            o_chunks.push(stores[r].fetch(ok)?.into_tensor()?);
            stores[r].release(ok)?;
            do_chunks.push(stores[r].fetch(dk)?.into_tensor()?);
            stores[r].release(dk)?;
        }
        steppers.push(ChunkedAttentionBwd::new(&saved.attn_saved[r], o_chunks, do_chunks)?);
    }

    for j in 0..u {
        ledger.set_phase("bwd:attn");
        let scores_bytes = (hat_dims.b * hat_dims.h * hat_dims.s * hat_dims.s) as u64 * 8;
        ledger.alloc(2 * chunk_bytes + scores_bytes + 3 * chunk_bytes);
        let mut dq_hat = Vec::with_capacity(p);
        let mut dk_hat = Vec::with_capacity(p);
        let mut dv_hat = Vec::with_capacity(p);
        for r in 0..p {
            let e = steppers[r].step_epoch(&mut stores[r])?;
            debug_assert_eq!(e.epoch, j);
            dq_hat.push(e.dq);
            dk_hat.push(e.dk);
            dv_hat.push(e.dv);
            traces[r].push(TraceOp { phase: "bwd:attn_epoch", chunk: j });
        }
        ledger.free(2 * chunk_bytes + scores_bytes);

        // Chunk j's gradients are final: Alltoall them back and run the
        // projection backward against the prefetched hidden slice.
        ledger.set_phase("bwd:proj");
        let dq_loc = alltoall_gather_heads(&dq_hat)?;
        let dk_loc = alltoall_gather_heads(&dk_hat)?;
        let dv_loc = alltoall_gather_heads(&dv_hat)?;
        ledger.alloc(2 * chunk_bytes); // fetched hidden slice + d_x slice
        for r in 0..p {
            let rows = chunk_dims.b * c_loc;
            let mut d_qkv = Matrix::zeros(rows, 3 * d_model);
            for (offset, grad) in [(0, &dq_loc[r]), (d_model, &dk_loc[r]), (2 * d_model, &dv_loc[r])] {
                let gm = grad.to_matrix();
                for rr in 0..rows {
                    for c in 0..d_model {
                        *d_qkv.at_mut(rr, offset + c) = gm.at(rr, c);
                    }
                }
            }
            let x_key = StoreKey::new(layer, j, Role::Hidden);
            let x = stores[r].fetch(x_key)?.into_tensor()?;
            grads[r].d_wqkv.add_assign(&matmul(&x.to_matrix().transpose(), &d_qkv)?)?;
            stores[r].release(x_key)?;
            stores[r].free(x_key)?;
            d_x[r][j].add_assign(&matmul(&d_qkv, &w.wqkv.transpose())?)?;
            traces[r].push(TraceOp { phase: "bwd:proj", chunk: j });
        }
        ledger.free(5 * chunk_bytes);
    }

    let mut audits = Vec::with_capacity(p);
    for s in steppers {
        audits.push(s.finish()?.audit);
    }

    // Everything left for this layer is dead: mark it free.
    for store in stores.iter_mut() {
        for i in 0..u {
            for role in [Role::Q, Role::K, Role::V, Role::Stats, Role::AttnOut, Role::DAttnOut] {
                store.free(StoreKey::new(layer, i, role))?;
            }
        }
    }

    let d_hidden: Vec<ChunkTensor> = (0..p)
        .map(|r| {
            let chunks: Vec<ChunkTensor> = d_x[r]
                .iter()
                .map(|m| ChunkTensor::from_matrix(m, chunk_dims, Layout::SeqLocalHeadsGlobal))
                .collect::<Result<_>>()?;
            ChunkTensor::concat_seq(&chunks)
        })
        .collect::<Result<_>>()?;

    Ok(FpdtBackwardOutput {
        d_hidden,
        grads,
        audits,
        traces,
    })
}
