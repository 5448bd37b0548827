//! Simulated sequence-parallel rank group and per-chunk Alltoall.
//!
//! Ranks are in-process: an Alltoall is an index permutation over an array
//! of per-rank tensors, which is exactly the part worth verifying. The wire
//! transport is the performance simulator's job.
//!
//! The rank-ordinal shuffle places global chunk `g` on rank `g mod p`, slot
//! `g / p`. Gathering slot `i` across ranks then yields global chunks
//! `i*p .. i*p + p - 1` in order, a contiguous token range, so the standard
//! lower-triangular causal mask stays valid after every per-chunk Alltoall.

use crate::error::{Error, Result};
use crate::tensor::{ChunkTensor, Dims, Layout};

/// The rank-ordinal placement of global chunks: `g -> (g mod p, g / p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShufflePerm {
    pub p: usize,
    pub u: usize,
}

impl ShufflePerm {
    pub fn new(p: usize, u: usize) -> Self {
        ShufflePerm { p, u }
    }

    /// Rank and slot holding global chunk `g`.
    pub fn placement(&self, g: usize) -> (usize, usize) {
        (g % self.p, g / self.p)
    }

    /// Global chunk held by `rank` at `slot`.
    pub fn global_chunk(&self, rank: usize, slot: usize) -> usize {
        slot * self.p + rank
    }

    pub fn total_chunks(&self) -> usize {
        self.p * self.u
    }
}

fn check_divisible(len: usize, p: usize, u: usize) -> Result<usize> {
    if p == 0 || u == 0 || len % (p * u) != 0 {
        return Err(Error::Divisibility {
            what: "sequence length",
            value: len,
            by: (p * u).max(1),
        });
    }
    Ok(len / (p * u))
}

/// Distribute a flat sequence to `p` ranks under the rank-ordinal shuffle:
/// rank `r`, slot `i` holds global chunk `i*p + r`. Works for token ids and
/// labels alike.
pub fn shuffle_tokens<T: Clone>(seq: &[T], p: usize, u: usize) -> Result<Vec<Vec<T>>> {
    let c = check_divisible(seq.len(), p, u)?;
    let perm = ShufflePerm::new(p, u);
    let mut ranks = vec![Vec::with_capacity(u * c); p];
    for (r, out) in ranks.iter_mut().enumerate() {
        for slot in 0..u {
            let g = perm.global_chunk(r, slot);
            out.extend_from_slice(&seq[g * c..(g + 1) * c]);
        }
    }
    Ok(ranks)
}

/// Exact inverse of [`shuffle_tokens`].
pub fn unshuffle_tokens<T: Clone>(ranks: &[Vec<T>], u: usize) -> Result<Vec<T>> {
    let p = ranks.len();
    let per_rank = ranks.first().map_or(0, |r| r.len());
    if p == 0 || per_rank % u != 0 || ranks.iter().any(|r| r.len() != per_rank) {
        return Err(Error::Divisibility {
            what: "per-rank length",
            value: per_rank,
            by: u.max(1),
        });
    }
    let c = per_rank / u;
    let perm = ShufflePerm::new(p, u);
    let mut out = vec![None; p * per_rank];
    for (r, rank_seq) in ranks.iter().enumerate() {
        for slot in 0..u {
            let g = perm.global_chunk(r, slot);
            for t in 0..c {
                out[g * c + t] = Some(rank_seq[slot * c + t].clone());
            }
        }
    }
    Ok(out.into_iter().map(|x| x.expect("bijection covers all")).collect())
}

/// Shuffle a full-sequence tensor into per-rank local tensors
/// (`SeqLocalHeadsGlobal`), token axis treated as the sequence.
pub fn shuffle_hidden(x: &ChunkTensor, p: usize, u: usize) -> Result<Vec<ChunkTensor>> {
    let c = check_divisible(x.dims.s, p, u)?;
    let perm = ShufflePerm::new(p, u);
    let mut ranks = Vec::with_capacity(p);
    for r in 0..p {
        let slots: Vec<ChunkTensor> = (0..u)
            .map(|slot| {
                let g = perm.global_chunk(r, slot);
                x.slice_seq(g * c, c)
            })
            .collect::<Result<_>>()?;
        ranks.push(ChunkTensor::concat_seq(&slots)?.with_layout(Layout::SeqLocalHeadsGlobal));
    }
    Ok(ranks)
}

/// Exact inverse of [`shuffle_hidden`].
pub fn unshuffle_hidden(ranks: &[ChunkTensor], u: usize) -> Result<ChunkTensor> {
    let p = ranks.len();
    let first = ranks
        .first()
        .ok_or_else(|| Error::DimMismatch("no rank tensors".into()))?;
    if first.dims.s % u != 0 {
        return Err(Error::Divisibility {
            what: "per-rank tokens",
            value: first.dims.s,
            by: u,
        });
    }
    let c = first.dims.s / u;
    let perm = ShufflePerm::new(p, u);
    let mut global_chunks: Vec<Option<ChunkTensor>> = vec![None; p * u];
    for (r, x) in ranks.iter().enumerate() {
        for slot in 0..u {
            let g = perm.global_chunk(r, slot);
            global_chunks[g] = Some(x.slice_seq(slot * c, c)?);
        }
    }
    let chunks: Vec<ChunkTensor> = global_chunks.into_iter().map(|c| c.expect("covered")).collect();
    ChunkTensor::concat_seq(&chunks)
}

/// A set of `p` simulated ranks, each holding a local shard of the sequence
/// in `SeqLocalHeadsGlobal` layout, pre-shuffled rank-ordinally.
#[derive(Debug, Clone)]
pub struct RankGroup {
    pub p: usize,
    pub u: usize,
    pub local: Vec<ChunkTensor>,
    pub perm: ShufflePerm,
}

impl RankGroup {
    /// Build a group from a full-sequence tensor: applies the rank-ordinal
    /// shuffle and shards tokens across ranks.
    pub fn from_global(x: &ChunkTensor, p: usize, u: usize) -> Result<Self> {
        if x.dims.h % p != 0 {
            return Err(Error::Divisibility {
                what: "head count",
                value: x.dims.h,
                by: p,
            });
        }
        check_divisible(x.dims.s, p, u)?;
        let local = shuffle_hidden(x, p, u)?;
        Ok(RankGroup {
            p,
            u,
            local,
            perm: ShufflePerm::new(p, u),
        })
    }

    /// Per-rank slice of slot `i` (the rank's `i`-th local chunk).
    pub fn slot_chunks(&self, slot: usize) -> Result<Vec<ChunkTensor>> {
        let c = self.local[0].dims.s / self.u;
        self.local.iter().map(|x| x.slice_seq(slot * c, c)).collect()
    }
}

/// Alltoall that scatters heads and gathers the sequence for one slot.
///
/// Input: per-rank `[b, c, h_global, d]` slot tensors (rank `r` holds global
/// chunk `slot*p + r`). Output: per-rank `[b, p*c, h_local, d]` covering the
/// contiguous token range of the slot's global chunk block, with rank `r'`
/// keeping heads `[r'*h_local, (r'+1)*h_local)`. Output buffers are freshly
/// allocated (real Alltoalls are not in-place).
pub fn alltoall_scatter_heads(slot_chunks: &[ChunkTensor]) -> Result<Vec<ChunkTensor>> {
    let p = slot_chunks.len();
    let first = slot_chunks
        .first()
        .ok_or_else(|| Error::DimMismatch("empty rank set".into()))?;
    let dims = first.dims;
    for t in slot_chunks {
        if t.dims != dims {
            return Err(Error::DimMismatch("per-rank slot shapes differ".into()));
        }
        if t.layout != Layout::SeqLocalHeadsGlobal {
            return Err(Error::LayoutMismatch {
                expected: Layout::SeqLocalHeadsGlobal,
                got: t.layout,
            });
        }
    }
    if dims.h % p != 0 {
        return Err(Error::Divisibility {
            what: "head count",
            value: dims.h,
            by: p,
        });
    }
    let c = dims.s;
    let h_local = dims.h / p;
    let out_dims = Dims::new(dims.b, p * c, h_local, dims.d);
    let mut out = Vec::with_capacity(p);
    for r_dst in 0..p {
        let mut t = ChunkTensor::zeros(out_dims, Layout::SeqGlobalHeadsLocal);
        for b in 0..dims.b {
            for tok in 0..p * c {
                let src_rank = tok / c;
                let src_tok = tok % c;
                for hl in 0..h_local {
                    let hg = r_dst * h_local + hl;
                    for d in 0..dims.d {
                        t.set(b, tok, hl, d, slot_chunks[src_rank].get(b, src_tok, hg, d));
                    }
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Exact inverse of [`alltoall_scatter_heads`]: gathers heads and scatters
/// the sequence back to the per-rank slot tensors.
pub fn alltoall_gather_heads(scattered: &[ChunkTensor]) -> Result<Vec<ChunkTensor>> {
    let p = scattered.len();
    let first = scattered
        .first()
        .ok_or_else(|| Error::DimMismatch("empty rank set".into()))?;
    let dims = first.dims;
    for t in scattered {
        if t.dims != dims {
            return Err(Error::DimMismatch("per-rank scattered shapes differ".into()));
        }
        if t.layout != Layout::SeqGlobalHeadsLocal {
            return Err(Error::LayoutMismatch {
                expected: Layout::SeqGlobalHeadsLocal,
                got: t.layout,
            });
        }
    }
    if dims.s % p != 0 {
        return Err(Error::Divisibility {
            what: "gathered tokens",
            value: dims.s,
            by: p,
        });
    }
    let c = dims.s / p;
    let h_local = dims.h;
    let out_dims = Dims::new(dims.b, c, p * h_local, dims.d);
    let mut out = Vec::with_capacity(p);
    for r_dst in 0..p {
        let mut t = ChunkTensor::zeros(out_dims, Layout::SeqLocalHeadsGlobal);
        for b in 0..dims.b {
            for tok in 0..c {
                for hg in 0..p * h_local {
                    let src_rank = hg / h_local;
                    let src_h = hg % h_local;
                    for d in 0..dims.d {
                        t.set(b, tok, hg, d, scattered[src_rank].get(b, r_dst * c + tok, src_h, d));
                    }
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}
