//! Monolithic attention oracle.
//!
//! Materializes the full score matrix and runs a plain softmax, which is
//! exactly what the chunked path avoids doing; that makes it the independent
//! reference the chunked forward and backward are compared against. Forward
//! and analytic backward are both here, in 64-bit with fixed loop orders.

use crate::attention::chunked::SparsityPlan;
use crate::attention::logit_scale;
use crate::error::{Error, Result};
use crate::tensor::{matmul, row_softmax_stable, ChunkTensor, Matrix};

fn check_shapes(q: &ChunkTensor, k: &ChunkTensor, v: &ChunkTensor, causal: bool) -> Result<()> {
    if q.dims.b != k.dims.b || q.dims.h != k.dims.h || q.dims.d != k.dims.d || k.dims != v.dims {
        return Err(Error::DimMismatch(format!(
            "attention shapes q={:?} k={:?} v={:?}",
            q.dims, k.dims, v.dims
        )));
    }
    if causal && q.dims.s != k.dims.s {
        return Err(Error::DimMismatch(
            "causal attention requires s_q == s_kv".into(),
        ));
    }
    Ok(())
}

/// Whether query token `tq` may attend to key token `tk`.
fn allowed(tq: usize, tk: usize, causal: bool, plan: Option<&SparsityPlan>, chunk_len: usize) -> bool {
    if causal && tk > tq {
        return false;
    }
    match plan {
        Some(p) => p.keep(tq / chunk_len, tk / chunk_len),
        None => true,
    }
}

/// Masked score matrix for one (batch, head): `q·kᵀ/√d` with `-inf` at
/// disallowed positions.
fn masked_scores(
    qm: &Matrix,
    km: &Matrix,
    causal: bool,
    plan: Option<&SparsityPlan>,
    chunk_len: usize,
) -> Result<Matrix> {
    let scale = logit_scale(qm.cols);
    let mut s = matmul(qm, &km.transpose())?.scale(scale);
    for tq in 0..s.rows {
        for tk in 0..s.cols {
            if !allowed(tq, tk, causal, plan, chunk_len) {
                *s.at_mut(tq, tk) = f64::NEG_INFINITY;
            }
        }
    }
    Ok(s)
}

/// softmax(q·kᵀ/√d + mask)·v, computed monolithically.
pub fn attention_reference(
    q: &ChunkTensor,
    k: &ChunkTensor,
    v: &ChunkTensor,
    causal: bool,
) -> Result<ChunkTensor> {
    attention_reference_planned(q, k, v, causal, None, 1)
}

/// Monolithic attention with an optional block-sparsity plan. `chunk_len`
/// defines the block grid the plan indexes into; every query row must keep
/// at least one block (the plan keeps diagonals, so causal rows always do).
pub fn attention_reference_planned(
    q: &ChunkTensor,
    k: &ChunkTensor,
    v: &ChunkTensor,
    causal: bool,
    plan: Option<&SparsityPlan>,
    chunk_len: usize,
) -> Result<ChunkTensor> {
    check_shapes(q, k, v, causal)?;
    let mut out = ChunkTensor::zeros(q.dims, q.layout);
    for b in 0..q.dims.b {
        for h in 0..q.dims.h {
            let qm = q.head_matrix(b, h);
            let km = k.head_matrix(b, h);
            let vm = v.head_matrix(b, h);
            let scores = masked_scores(&qm, &km, causal, plan, chunk_len)?;
            let probs = row_softmax_stable(&scores);
            let o = matmul(&probs, &vm)?;
            out.set_head_matrix(b, h, &o);
        }
    }
    out.assert_finite("attention_reference output")?;
    Ok(out)
}

/// Analytic gradient of the monolithic attention. Given the upstream
/// gradient `d_out`, returns `(dq, dk, dv)`.
///
/// Standard softmax-attention backward: with `P = softmax(S)`,
/// `dV = Pᵀ·dO`, `dP = dO·Vᵀ`, `dS = P ∘ (dP − rowsum(dP ∘ P))`,
/// `dQ = dS·K/√d`, `dK = dSᵀ·Q/√d`.
pub fn attention_reference_backward(
    q: &ChunkTensor,
    k: &ChunkTensor,
    v: &ChunkTensor,
    d_out: &ChunkTensor,
    causal: bool,
    plan: Option<&SparsityPlan>,
    chunk_len: usize,
) -> Result<(ChunkTensor, ChunkTensor, ChunkTensor)> {
    check_shapes(q, k, v, causal)?;
    if d_out.dims != q.dims {
        return Err(Error::DimMismatch("d_out shape != q shape".into()));
    }
    let scale = logit_scale(q.dims.d);
    let mut dq = ChunkTensor::zeros(q.dims, q.layout);
    let mut dk = ChunkTensor::zeros(k.dims, k.layout);
    let mut dv = ChunkTensor::zeros(v.dims, v.layout);
    for b in 0..q.dims.b {
        for h in 0..q.dims.h {
            let qm = q.head_matrix(b, h);
            let km = k.head_matrix(b, h);
            let vm = v.head_matrix(b, h);
            let dom = d_out.head_matrix(b, h);
            let scores = masked_scores(&qm, &km, causal, plan, chunk_len)?;
            let probs = row_softmax_stable(&scores);

            let dv_m = matmul(&probs.transpose(), &dom)?;
            let dp = matmul(&dom, &vm.transpose())?;
            let mut ds = Matrix::zeros(probs.rows, probs.cols);
            for r in 0..probs.rows {
                let mut rowdot = 0.0;
                for c in 0..probs.cols {
                    rowdot += dp.at(r, c) * probs.at(r, c);
                }
                for c in 0..probs.cols {
                    *ds.at_mut(r, c) = probs.at(r, c) * (dp.at(r, c) - rowdot);
                }
            }
            let dq_m = matmul(&ds, &km)?.scale(scale);
            let dk_m = matmul(&ds.transpose(), &qm)?.scale(scale);
            dq.set_head_matrix(b, h, &dq_m);
            dk.set_head_matrix(b, h, &dk_m);
            dv.set_head_matrix(b, h, &dv_m);
        }
    }
    Ok((dq, dk, dv))
}
