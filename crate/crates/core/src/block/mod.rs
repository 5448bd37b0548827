//! Transformer block: monolithic reference and the chunked/distributed
//! pipeline, sharing one structure so their outputs are directly comparable.
//!
//! Block structure (identical on both paths): causal attention and a
//! two-layer FFN, each wrapped in a residual connection; no normalization,
//! no dropout, no biases. The FFN activation is the tanh-form GELU used by
//! GPT-class models, fixed as a constant of this artifact.

pub mod fpdt;
pub mod reference;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub use fpdt::{
    chunked_ffn, chunked_loss_head, fpdt_block_backward, fpdt_block_forward, reduce_block_grads,
    ChunkedLossOutput, FpdtBackwardOutput, FpdtBlockOutput, FpdtSaved, TraceOp,
};
pub use reference::{
    block_reference_backward, block_reference_forward, block_reference_forward_cached,
    loss_reference, BlockCache, BlockGrads, LossOutput,
};

/// Projection and FFN weights of one block plus the loss-head projection.
/// Plain dense matrices; `hidden = heads * head_dim`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    /// hidden -> 3*hidden fused q/k/v projection.
    pub wqkv: Matrix,
    /// hidden -> hidden output projection.
    pub wo: Matrix,
    /// hidden -> ffn_dim.
    pub wffn1: Matrix,
    /// ffn_dim -> hidden.
    pub wffn2: Matrix,
    /// hidden -> vocab loss-head projection.
    pub wvocab: Matrix,
}

impl BlockWeights {
    /// Seeded init, scaled by 1/sqrt(fan_in) per matrix so activations stay
    /// O(1) at verification scale.
    pub fn random(hidden: usize, ffn_dim: usize, vocab: usize, rng: &mut Rng) -> Self {
        let scaled = |rows: usize, cols: usize, rng: &mut Rng| {
            let s = 1.0 / (rows as f64).sqrt();
            let mut m = Matrix::random(rows, cols, rng);
            for x in &mut m.data {
                *x *= s;
            }
            m
        };
        BlockWeights {
            wqkv: scaled(hidden, 3 * hidden, rng),
            wo: scaled(hidden, hidden, rng),
            wffn1: scaled(hidden, ffn_dim, rng),
            wffn2: scaled(ffn_dim, hidden, rng),
            wvocab: scaled(hidden, vocab, rng),
        }
    }

    pub fn zeros(hidden: usize, ffn_dim: usize, vocab: usize) -> Self {
        BlockWeights {
            wqkv: Matrix::zeros(hidden, 3 * hidden),
            wo: Matrix::zeros(hidden, hidden),
            wffn1: Matrix::zeros(hidden, ffn_dim),
            wffn2: Matrix::zeros(ffn_dim, hidden),
            wvocab: Matrix::zeros(hidden, vocab),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wqkv.rows
    }

    pub fn ffn_dim(&self) -> usize {
        self.wffn1.cols
    }

    pub fn vocab(&self) -> usize {
        self.wvocab.cols
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden();
        let f = self.ffn_dim();
        let ok = self.wqkv.cols == 3 * d
            && self.wo.rows == d
            && self.wo.cols == d
            && self.wffn1.rows == d
            && self.wffn2.rows == f
            && self.wffn2.cols == d
            && self.wvocab.rows == d;
        if ok {
            Ok(())
        } else {
            Err(Error::DimMismatch("block weight shapes inconsistent".into()))
        }
    }
}

/// Chunk counts for one block execution. Defaults follow the granularity
/// rules: FFN runs at twice the attention chunk count, and the loss head at
/// `ceil(vocab/hidden) * 2` so its logits buffer never spikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlanExec {
    pub u_attn: usize,
    pub u_ffn: usize,
    pub u_loss: usize,
}

impl ChunkPlanExec {
    pub fn with_defaults(u_attn: usize, vocab: usize, hidden: usize) -> Self {
        ChunkPlanExec {
            u_attn,
            u_ffn: 2 * u_attn,
            u_loss: vocab.div_ceil(hidden) * 2,
        }
    }
}

/// Tanh-form GELU (the GPT-2 constant 0.044715).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + C * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let g = k * (x + C * x * x * x);
    let t = g.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * C * x * x)
}

/// Allocation-ledger shim: counts live simulated-HBM bytes so per-phase
/// peaks are assertable. Tracks the representative device (rank 0); the
/// ranks are lockstep so their footprints are identical.
#[derive(Debug, Clone, Default)]
pub struct HbmLedger {
    current: u64,
    peak: u64,
    phase: String,
    phase_peaks: BTreeMap<String, u64>,
}

impl HbmLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&mut self, phase: &str) {
        self.phase = phase.to_string();
        // A phase's peak includes whatever is already live when it starts.
        let e = self.phase_peaks.entry(self.phase.clone()).or_insert(0);
        *e = (*e).max(self.current);
    }

    pub fn alloc(&mut self, bytes: u64) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
        if !self.phase.is_empty() {
            let e = self.phase_peaks.entry(self.phase.clone()).or_insert(0);
            *e = (*e).max(self.current);
        }
    }

    pub fn free(&mut self, bytes: u64) {
        debug_assert!(self.current >= bytes, "ledger free underflow");
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn phase_peak(&self, phase: &str) -> u64 {
        self.phase_peaks.get(phase).copied().unwrap_or(0)
    }

    pub fn phase_peaks(&self) -> &BTreeMap<String, u64> {
        &self.phase_peaks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_prime_matches_finite_differences() {
        let eps = 1e-6;
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_prime(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu(x) -> x for large positive x, -> 0 for large negative x.
        assert!((gelu(6.0) - 6.0).abs() < 1e-6);
        assert!(gelu(-6.0).abs() < 1e-6);
    }

    #[test]
    fn chunk_plan_defaults() {
        let plan = ChunkPlanExec::with_defaults(4, 32000, 4096);
        assert_eq!(plan.u_ffn, 8);
        // ceil(32000/4096) * 2 = ceil(7.8125) * 2 = 16.
        assert_eq!(plan.u_loss, 16);
        let plan = ChunkPlanExec::with_defaults(1, 4096, 4096);
        assert_eq!(plan.u_loss, 2);
    }

    #[test]
    fn ledger_tracks_phase_peaks() {
        let mut l = HbmLedger::new();
        l.set_phase("a");
        l.alloc(100);
        l.alloc(50);
        l.free(50);
        l.set_phase("b");
        l.alloc(25);
        assert_eq!(l.phase_peak("a"), 150);
        assert_eq!(l.phase_peak("b"), 125);
        assert_eq!(l.peak(), 150);
        assert_eq!(l.current(), 125);
    }
}
