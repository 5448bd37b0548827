//! Chunked causal attention over an offload store.
//!
//! Forward: query chunks are processed in order; for chunk `i` the earlier
//! KV chunks are fetched from the store one pair at a time (two pairs with
//! double buffering), folded in through the online-softmax recurrence, and
//! the current chunk's q/k/v are offloaded once the chunk's output is final.
//! At most one fetched KV pair is resident at any instant in the strict
//! schedule; the store ledger's high-water mark proves it.
//!
//! Backward: nested loops with key/value on the outside and query on the
//! inside. Score blocks are recomputed from fetched q/k chunks plus the
//! saved per-row (m, l) stats instead of storing probabilities. `dk_j` and
//! `dv_j` are finalized entirely within outer iteration `j`; `dq_i` receives
//! its last contribution at outer iteration `i`. The returned audit records
//! the write epochs so tests can assert the schedule.

use crate::attention::logit_scale;
use crate::attention::online::OnlineState;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::store::{OfflStore, Payload, Role, SoftmaxStats, StoreKey};
use crate::tensor::{matmul, ChunkTensor, Dims, Layout, Matrix};

/// Relation of a (query chunk, KV chunk) block under the causal mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// kv < q: every position visible.
    FullAttend,
    /// kv = q: lower-triangular mask inside the block.
    Diagonal,
    /// kv > q: nothing visible; the block is never computed.
    Skip,
}

/// Pure function from chunk indices to block kind.
#[derive(Debug, Clone, Copy)]
pub struct CausalChunkMask;

impl CausalChunkMask {
    pub fn kind(q_chunk: usize, kv_chunk: usize) -> BlockKind {
        use std::cmp::Ordering::*;
        match kv_chunk.cmp(&q_chunk) {
            Less => BlockKind::FullAttend,
            Equal => BlockKind::Diagonal,
            Greater => BlockKind::Skip,
        }
    }
}

/// Deterministic block-sparsity plan: which causally valid KV blocks are
/// kept per query chunk. Diagonal blocks are always kept so every query row
/// attends to something; a seeded shuffle drops a `rho` fraction of the
/// off-diagonal blocks.
#[derive(Debug, Clone)]
pub struct SparsityPlan {
    u: usize,
    rho: f64,
    keep: Vec<Vec<bool>>,
}

impl SparsityPlan {
    pub fn new(u: usize, rho: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidPlan(format!("sparsity rho {rho} outside [0, 1]")));
        }
        let mut keep = vec![vec![false; u]; u];
        let mut off_diag = Vec::new();
        for q in 0..u {
            keep[q][q] = true;
            for kv in 0..q {
                off_diag.push((q, kv));
            }
        }
        let n_drop = (rho * off_diag.len() as f64).round() as usize;
        let mut rng = Rng::new(seed);
        rng.shuffle(&mut off_diag);
        for &(q, kv) in off_diag.iter().skip(n_drop) {
            keep[q][kv] = true;
        }
        Ok(SparsityPlan { u, rho, keep })
    }

    /// Keep-everything plan.
    pub fn dense(u: usize) -> Self {
        SparsityPlan {
            u,
            rho: 0.0,
            keep: vec![vec![true; u]; u],
        }
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn keep(&self, q_chunk: usize, kv_chunk: usize) -> bool {
        self.keep[q_chunk][kv_chunk]
    }

    /// Fraction of causally valid off-diagonal blocks dropped.
    pub fn dropped_fraction(&self) -> f64 {
        let mut total = 0usize;
        let mut dropped = 0usize;
        for q in 0..self.u {
            for kv in 0..q {
                total += 1;
                if !self.keep[q][kv] {
                    dropped += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            dropped as f64 / total as f64
        }
    }
}

/// Descriptor of a completed chunked forward: where the chunks live in the
/// store and how to recompute score blocks.
#[derive(Debug, Clone)]
pub struct SavedForward {
    pub layer: usize,
    pub u: usize,
    pub chunk_dims: Dims,
    pub plan: Option<SparsityPlan>,
}

/// Output chunks plus the saved state needed by the backward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub o_chunks: Vec<ChunkTensor>,
    pub saved: SavedForward,
}

/// Incremental chunked forward. `process_chunk` is called once per chunk in
/// order, which is how the block pipeline feeds it (each chunk arrives from
/// its own projection + Alltoall step).
pub struct ChunkedAttentionFwd {
    layer: usize,
    u: usize,
    plan: Option<SparsityPlan>,
    double_buffer: bool,
    next_chunk: usize,
    chunk_dims: Option<Dims>,
}

impl ChunkedAttentionFwd {
    pub fn new(layer: usize, u: usize, plan: Option<SparsityPlan>, double_buffer: bool) -> Self {
        ChunkedAttentionFwd {
            layer,
            u,
            plan,
            double_buffer,
            next_chunk: 0,
            chunk_dims: None,
        }
    }

    fn kept(&self, q_chunk: usize, kv_chunk: usize) -> bool {
        match &self.plan {
            Some(p) => p.keep(q_chunk, kv_chunk),
            None => true,
        }
    }

    /// Run chunk `i` (the internal counter) against KV chunks `0..=i`,
    /// fetching past pairs from the store, then offload this chunk's
    /// q/k/v and softmax stats.
    pub fn process_chunk(
        &mut self,
        q: ChunkTensor,
        k: ChunkTensor,
        v: ChunkTensor,
        store: &mut OfflStore,
    ) -> Result<ChunkTensor> {
        let i = self.next_chunk;
        if i >= self.u {
            return Err(Error::InvalidPlan(format!("chunk {i} beyond u={}", self.u)));
        }
        for t in [&q, &k, &v] {
            if t.layout != Layout::SeqGlobalHeadsLocal {
                return Err(Error::LayoutMismatch {
                    expected: Layout::SeqGlobalHeadsLocal,
                    got: t.layout,
                });
            }
        }
        if q.dims != k.dims || k.dims != v.dims {
            return Err(Error::DimMismatch("chunk q/k/v shape mismatch".into()));
        }
        match self.chunk_dims {
            None => self.chunk_dims = Some(q.dims),
            Some(d) if d == q.dims => {}
            Some(d) => {
                return Err(Error::DimMismatch(format!(
                    "chunk {i} dims {:?} != first chunk dims {:?}",
                    q.dims, d
                )))
            }
        }
        let dims = q.dims;
        let scale = logit_scale(dims.d);

        let mut states: Vec<OnlineState> = (0..dims.b * dims.h)
            .map(|_| OnlineState::new(dims.s, dims.d))
            .collect();

        let fold_block = |kc: &ChunkTensor,
                              vc: &ChunkTensor,
                              diagonal: bool,
                              states: &mut Vec<OnlineState>|
         -> Result<()> {
            for b in 0..dims.b {
                for h in 0..dims.h {
                    let qm = q.head_matrix(b, h);
                    let km = kc.head_matrix(b, h);
                    let vm = vc.head_matrix(b, h);
                    let mut scores = matmul(&qm, &km.transpose())?.scale(scale);
                    if diagonal {
                        for r in 0..scores.rows {
                            for c in (r + 1)..scores.cols {
                                *scores.at_mut(r, c) = f64::NEG_INFINITY;
                            }
                        }
                    }
                    states[b * dims.h + h].update(&scores, &vm)?;
                }
            }
            Ok(())
        };

        // Past KV chunks, fetched one pair at a time. With double buffering
        // the next pair is prefetched before the current one is released, so
        // two pairs are briefly resident.
        let kept_past: Vec<usize> = (0..i).filter(|&j| self.kept(i, j)).collect();
        let fetch_pair = |store: &mut OfflStore, j: usize| -> Result<(ChunkTensor, ChunkTensor)> {
            let kc = store.fetch(StoreKey::new(self.layer, j, Role::K))?.into_tensor()?;
            let vc = store.fetch(StoreKey::new(self.layer, j, Role::V))?.into_tensor()?;
            Ok((kc, vc))
        };
        let release_pair = |store: &mut OfflStore, j: usize| -> Result<()> {
            store.release(StoreKey::new(self.layer, j, Role::K))?;
            store.release(StoreKey::new(self.layer, j, Role::V))?;
            Ok(())
        };

        if self.double_buffer {
            let mut current: Option<(usize, ChunkTensor, ChunkTensor)> = None;
            for (pos, &j) in kept_past.iter().enumerate() {
                if pos == 0 {
                    let (kc, vc) = fetch_pair(store, j)?;
                    current = Some((j, kc, vc));
                }
                let (cur_j, kc, vc) = current.take().expect("buffer filled");
                // Prefetch the next pair while "computing" on the current one.
                let next = kept_past.get(pos + 1).copied();
                let prefetched = match next {
                    Some(nj) => Some((nj, fetch_pair(store, nj)?)),
                    None => None,
                };
                fold_block(&kc, &vc, false, &mut states)?;
                release_pair(store, cur_j)?;
                current = prefetched.map(|(nj, (kc, vc))| (nj, kc, vc));
            }
        } else {
            for &j in &kept_past {
                let (kc, vc) = fetch_pair(store, j)?;
                fold_block(&kc, &vc, false, &mut states)?;
                release_pair(store, j)?;
            }
        }

        // Current chunk: arrived via Alltoall, not fetched from the store.
        fold_block(&k, &v, true, &mut states)?;

        // Assemble output and stats, then offload q/k/v and stats.
        let mut out = ChunkTensor::zeros(dims, Layout::SeqGlobalHeadsLocal);
        let mut m = vec![0.0; dims.b * dims.h * dims.s];
        let mut l = vec![0.0; dims.b * dims.h * dims.s];
        for b in 0..dims.b {
            for h in 0..dims.h {
                let st = &states[b * dims.h + h];
                out.set_head_matrix(b, h, st.finalize());
                let base = (b * dims.h + h) * dims.s;
                m[base..base + dims.s].copy_from_slice(&st.m);
                l[base..base + dims.s].copy_from_slice(&st.l);
            }
        }
        out.assert_finite("chunked attention output")?;

        store.offload(StoreKey::new(self.layer, i, Role::K), Payload::Tensor(k))?;
        store.offload(StoreKey::new(self.layer, i, Role::V), Payload::Tensor(v))?;
        store.offload(StoreKey::new(self.layer, i, Role::Q), Payload::Tensor(q))?;
        store.offload(
            StoreKey::new(self.layer, i, Role::Stats),
            Payload::Stats(SoftmaxStats { m, l }),
        )?;

        self.next_chunk += 1;
        Ok(out)
    }

    pub fn finish(self) -> Result<SavedForward> {
        if self.next_chunk != self.u {
            return Err(Error::InvalidPlan(format!(
                "finish after {} of {} chunks",
                self.next_chunk, self.u
            )));
        }
        Ok(SavedForward {
            layer: self.layer,
            u: self.u,
            chunk_dims: self.chunk_dims.expect("u >= 1 processed"),
            plan: self.plan,
        })
    }
}

/// Chunked forward over pre-split chunks. Thin wrapper around
/// [`ChunkedAttentionFwd`] for direct use and tests.
pub fn forward_chunked(
    q_chunks: Vec<ChunkTensor>,
    k_chunks: Vec<ChunkTensor>,
    v_chunks: Vec<ChunkTensor>,
    store: &mut OfflStore,
    plan: Option<SparsityPlan>,
    double_buffer: bool,
) -> Result<ForwardOutput> {
    let u = q_chunks.len();
    if u == 0 || k_chunks.len() != u || v_chunks.len() != u {
        return Err(Error::DimMismatch("chunk list lengths differ or empty".into()));
    }
    let mut fwd = ChunkedAttentionFwd::new(0, u, plan, double_buffer);
    let mut o_chunks = Vec::with_capacity(u);
    for ((q, k), v) in q_chunks.into_iter().zip(k_chunks).zip(v_chunks) {
        o_chunks.push(fwd.process_chunk(q, k, v, store)?);
    }
    Ok(ForwardOutput {
        o_chunks,
        saved: fwd.finish()?,
    })
}

/// Gradients from the chunked backward, plus the write-epoch audit.
#[derive(Debug)]
pub struct AttentionGrads {
    pub dq_chunks: Vec<ChunkTensor>,
    pub dk_chunks: Vec<ChunkTensor>,
    pub dv_chunks: Vec<ChunkTensor>,
    pub audit: BackwardAudit,
}

/// Which outer-loop epochs wrote each gradient buffer.
#[derive(Debug, Clone)]
pub struct BackwardAudit {
    pub dk_write_epochs: Vec<Vec<usize>>,
    pub dv_write_epochs: Vec<Vec<usize>>,
    pub dq_write_epochs: Vec<Vec<usize>>,
}

/// Gradients of one outer-loop epoch: chunk `epoch`'s dq, dk, dv are all
/// final when this is handed out.
#[derive(Debug)]
pub struct EpochGrads {
    pub epoch: usize,
    pub dq: ChunkTensor,
    pub dk: ChunkTensor,
    pub dv: ChunkTensor,
}

/// Epoch-stepped chunked backward. The block pipeline drives one stepper per
/// rank and advances them in lockstep so the per-epoch Alltoall has every
/// rank's gradients available at the same step.
pub struct ChunkedAttentionBwd {
    saved: SavedForward,
    d_out_chunks: Vec<ChunkTensor>,
    /// Per chunk, per (b, h, row): rowsum of dO ∘ O, the correction term of
    /// the softmax backward.
    d_stats: Vec<Vec<f64>>,
    dq_chunks: Vec<ChunkTensor>,
    dk_chunks: Vec<Option<ChunkTensor>>,
    dv_chunks: Vec<Option<ChunkTensor>>,
    audit: BackwardAudit,
    next_epoch: usize,
}

impl ChunkedAttentionBwd {
    pub fn new(
        saved: &SavedForward,
        o_chunks: Vec<ChunkTensor>,
        d_out_chunks: Vec<ChunkTensor>,
    ) -> Result<Self> {
        let u = saved.u;
        let dims = saved.chunk_dims;
        if o_chunks.len() != u || d_out_chunks.len() != u {
            return Err(Error::DimMismatch(format!(
                "expected {u} o/d_out chunks, got {}/{}",
                o_chunks.len(),
                d_out_chunks.len()
            )));
        }
        for (oc, dc) in o_chunks.iter().zip(&d_out_chunks) {
            if oc.dims != dims || dc.dims != dims {
                return Err(Error::DimMismatch("o/d_out chunk shape mismatch".into()));
            }
        }
        let rows = dims.b * dims.h * dims.s;
        let mut d_stats: Vec<Vec<f64>> = vec![vec![0.0; rows]; u];
        for i in 0..u {
            for b in 0..dims.b {
                for h in 0..dims.h {
                    for r in 0..dims.s {
                        let mut acc = 0.0;
                        for c in 0..dims.d {
                            acc += d_out_chunks[i].get(b, r, h, c) * o_chunks[i].get(b, r, h, c);
                        }
                        d_stats[i][(b * dims.h + h) * dims.s + r] = acc;
                    }
                }
            }
        }
        Ok(ChunkedAttentionBwd {
            saved: saved.clone(),
            d_out_chunks,
            d_stats,
            dq_chunks: (0..u)
                .map(|_| ChunkTensor::zeros(dims, Layout::SeqGlobalHeadsLocal))
                .collect(),
            dk_chunks: (0..u).map(|_| None).collect(),
            dv_chunks: (0..u).map(|_| None).collect(),
            audit: BackwardAudit {
                dk_write_epochs: vec![Vec::new(); u],
                dv_write_epochs: vec![Vec::new(); u],
                dq_write_epochs: vec![Vec::new(); u],
            },
            next_epoch: 0,
        })
    }

    pub fn u(&self) -> usize {
        self.saved.u
    }

    fn kept(&self, i: usize, j: usize) -> bool {
        match &self.saved.plan {
            Some(p) => p.keep(i, j),
            None => true,
        }
    }

    /// Run outer iteration `j = next_epoch`: fetch the epoch's KV pair,
    /// sweep query chunks `i >= j`, and hand back the finalized gradients of
    /// chunk `j`.
    pub fn step_epoch(&mut self, store: &mut OfflStore) -> Result<EpochGrads> {
        let j = self.next_epoch;
        let u = self.saved.u;
        let dims = self.saved.chunk_dims;
        if j >= u {
            return Err(Error::InvalidPlan(format!("epoch {j} beyond u={u}")));
        }
        let scale = logit_scale(dims.d);
        let k_key = StoreKey::new(self.saved.layer, j, Role::K);
        let v_key = StoreKey::new(self.saved.layer, j, Role::V);
        let kc = store.fetch(k_key)?.into_tensor()?;
        let vc = store.fetch(v_key)?.into_tensor()?;
        let mut dk = ChunkTensor::zeros(dims, Layout::SeqGlobalHeadsLocal);
        let mut dv = ChunkTensor::zeros(dims, Layout::SeqGlobalHeadsLocal);

        for i in j..u {
            if !self.kept(i, j) {
                continue;
            }
            let q_key = StoreKey::new(self.saved.layer, i, Role::Q);
            let s_key = StoreKey::new(self.saved.layer, i, Role::Stats);
            let qc = store.fetch(q_key)?.into_tensor()?;
            let stats = store.fetch(s_key)?.into_stats()?;

            for b in 0..dims.b {
                for h in 0..dims.h {
                    let qm = qc.head_matrix(b, h);
                    let km = kc.head_matrix(b, h);
                    let vm = vc.head_matrix(b, h);
                    let dom = self.d_out_chunks[i].head_matrix(b, h);
                    let base = (b * dims.h + h) * dims.s;

                    // Recompute the block's probabilities from scores and
                    // the saved (m, l): P = exp(S - m) / l.
                    let mut scores = matmul(&qm, &km.transpose())?.scale(scale);
                    if i == j {
                        for r in 0..scores.rows {
                            for c in (r + 1)..scores.cols {
                                *scores.at_mut(r, c) = f64::NEG_INFINITY;
                            }
                        }
                    }
                    let mut probs = Matrix::zeros(dims.s, dims.s);
                    for r in 0..dims.s {
                        let m_i = stats.m[base + r];
                        let l_i = stats.l[base + r];
                        for c in 0..dims.s {
                            let s = scores.at(r, c);
                            *probs.at_mut(r, c) = if s == f64::NEG_INFINITY {
                                0.0
                            } else {
                                (s - m_i).exp() / l_i
                            };
                        }
                    }

                    let dv_m = matmul(&probs.transpose(), &dom)?;
                    let dp = matmul(&dom, &vm.transpose())?;
                    let mut ds = Matrix::zeros(dims.s, dims.s);
                    for r in 0..dims.s {
                        let rowterm = self.d_stats[i][base + r];
                        for c in 0..dims.s {
                            *ds.at_mut(r, c) = probs.at(r, c) * (dp.at(r, c) - rowterm);
                        }
                    }
                    let dq_m = matmul(&ds, &km)?.scale(scale);
                    let dk_m = matmul(&ds.transpose(), &qm)?.scale(scale);

                    let mut dq_head = self.dq_chunks[i].head_matrix(b, h);
                    dq_head.add_assign(&dq_m)?;
                    self.dq_chunks[i].set_head_matrix(b, h, &dq_head);

                    let mut dk_head = dk.head_matrix(b, h);
                    dk_head.add_assign(&dk_m)?;
                    dk.set_head_matrix(b, h, &dk_head);

                    let mut dv_head = dv.head_matrix(b, h);
                    dv_head.add_assign(&dv_m)?;
                    dv.set_head_matrix(b, h, &dv_head);
                }
            }
            self.audit.dq_write_epochs[i].push(j);
            self.audit.dk_write_epochs[j].push(j);
            self.audit.dv_write_epochs[j].push(j);

            store.release(q_key)?;
            store.release(s_key)?;
        }

        store.release(k_key)?;
        store.release(v_key)?;
        let out = EpochGrads {
            epoch: j,
            dq: self.dq_chunks[j].clone(),
            dk: dk.clone(),
            dv: dv.clone(),
        };
        self.dk_chunks[j] = Some(dk);
        self.dv_chunks[j] = Some(dv);
        self.next_epoch += 1;
        Ok(out)
    }

    pub fn finish(self) -> Result<AttentionGrads> {
        if self.next_epoch != self.saved.u {
            return Err(Error::InvalidPlan(format!(
                "finish after {} of {} epochs",
                self.next_epoch, self.saved.u
            )));
        }
        Ok(AttentionGrads {
            dq_chunks: self.dq_chunks,
            dk_chunks: self.dk_chunks.into_iter().map(|c| c.expect("filled")).collect(),
            dv_chunks: self.dv_chunks.into_iter().map(|c| c.expect("filled")).collect(),
            audit: self.audit,
        })
    }
}

/// Chunked attention backward: outer loop over KV chunk `j`, inner loop over
/// query chunk `i >= j`. See the module docs for the schedule.
pub fn backward_chunked(
    saved: &SavedForward,
    o_chunks: &[ChunkTensor],
    d_out_chunks: &[ChunkTensor],
    store: &mut OfflStore,
) -> Result<AttentionGrads> {
    backward_chunked_with_hook(saved, o_chunks, d_out_chunks, store, |_, _, _, _| Ok(()))
}

/// Same as [`backward_chunked`], invoking `on_epoch_end(j, dq_j, dk_j, dv_j)`
/// at the end of each outer iteration, when all three of chunk `j`'s
/// gradients are final.
pub fn backward_chunked_with_hook(
    saved: &SavedForward,
    o_chunks: &[ChunkTensor],
    d_out_chunks: &[ChunkTensor],
    store: &mut OfflStore,
    mut on_epoch_end: impl FnMut(usize, &ChunkTensor, &ChunkTensor, &ChunkTensor) -> Result<()>,
) -> Result<AttentionGrads> {
    let mut stepper = ChunkedAttentionBwd::new(saved, o_chunks.to_vec(), d_out_chunks.to_vec())?;
    for _ in 0..saved.u {
        let e = stepper.step_epoch(store)?;
        on_epoch_end(e.epoch, &e.dq, &e.dk, &e.dv)?;
    }
    stepper.finish()
}
