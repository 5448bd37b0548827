//! End-to-end checks of the chunked distributed block against the
//! monolithic single-rank reference.

use fpdt_core::block::{
    block_reference_backward, block_reference_forward, block_reference_forward_cached,
    chunked_ffn, chunked_loss_head, fpdt_block_backward, fpdt_block_forward, loss_reference,
    reduce_block_grads, BlockWeights, ChunkPlanExec, HbmLedger,
};
use fpdt_core::layout::{shuffle_hidden, shuffle_tokens, unshuffle_hidden, unshuffle_tokens, RankGroup};
use fpdt_core::store::OfflStore;
use fpdt_core::tensor::{ChunkTensor, Dims, Layout, Matrix};
use fpdt_core::Rng;

struct Setup {
    x: ChunkTensor,
    w: BlockWeights,
}

fn setup(seed: u64, s: usize, h: usize, d: usize, f: usize, vocab: usize) -> Setup {
    let mut rng = Rng::new(seed);
    let x = ChunkTensor::random(Dims::new(1, s, h, d), Layout::SeqLocalHeadsGlobal, &mut rng);
    let w = BlockWeights::random(h * d, f, vocab, &mut rng);
    Setup { x, w }
}

fn run_fpdt_forward(
    su: &Setup,
    p: usize,
    u: usize,
) -> (fpdt_core::block::FpdtBlockOutput, Vec<OfflStore>, HbmLedger) {
    let group = RankGroup::from_global(&su.x, p, u).unwrap();
    let plan = ChunkPlanExec::with_defaults(u, su.w.vocab(), su.w.hidden());
    let mut stores: Vec<OfflStore> = (0..p).map(|_| OfflStore::unbounded()).collect();
    let mut ledger = HbmLedger::new();
    let out = fpdt_block_forward(&group, &su.w, &plan, &mut stores, &mut ledger, 0).unwrap();
    (out, stores, ledger)
}

fn gathered_output(out: &fpdt_core::block::FpdtBlockOutput, u: usize) -> ChunkTensor {
    unshuffle_hidden(&out.outputs, u).unwrap()
}

#[test]
fn single_rank_single_chunk_matches_reference() {
    let su = setup(100, 16, 2, 4, 16, 11);
    let want = block_reference_forward(&su.x, &su.w).unwrap();
    let (out, _, _) = run_fpdt_forward(&su, 1, 1);
    let got = gathered_output(&out, 1);
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn p2_u4_matches_reference() {
    let su = setup(101, 64, 4, 4, 32, 17);
    let want = block_reference_forward(&su.x, &su.w).unwrap();
    let (out, _, _) = run_fpdt_forward(&su, 2, 4);
    let got = gathered_output(&out, 4);
    let diff = got.max_abs_diff(&want);
    assert!(diff < 1e-9, "diff={diff}");
}

#[test]
fn forward_grid_matches_reference() {
    for &p in &[1usize, 2, 4] {
        for &u in &[1usize, 2, 4] {
            let su = setup(102 + (p * 10 + u) as u64, 32, 4, 4, 16, 7);
            let want = block_reference_forward(&su.x, &su.w).unwrap();
            let (out, _, _) = run_fpdt_forward(&su, p, u);
            let got = gathered_output(&out, u);
            let diff = got.max_abs_diff(&want);
            assert!(diff < 1e-9, "p={p} u={u} diff={diff}");
        }
    }
}

#[test]
fn lockstep_traces_identical_across_ranks() {
    let su = setup(103, 64, 4, 4, 32, 9);
    let (out, mut stores, _) = run_fpdt_forward(&su, 4, 4);
    for r in 1..4 {
        assert_eq!(out.traces[0], out.traces[r], "forward trace rank {r}");
    }
    // Backward traces too.
    let mut rng = Rng::new(104);
    let d_out =
        ChunkTensor::random(su.x.dims, Layout::SeqLocalHeadsGlobal, &mut rng);
    let d_out_ranks = shuffle_hidden(&d_out, 4, 4).unwrap();
    let mut ledger = HbmLedger::new();
    let back =
        fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger).unwrap();
    for r in 1..4 {
        assert_eq!(back.traces[0], back.traces[r], "backward trace rank {r}");
    }
}

#[test]
fn backward_matches_reference_block() {
    let su = setup(105, 32, 4, 4, 24, 13);
    let (_, cache) = block_reference_forward_cached(&su.x, &su.w).unwrap();
    let mut rng = Rng::new(106);
    let d_out = ChunkTensor::random(su.x.dims, Layout::SeqLocalHeadsGlobal, &mut rng);
    let (want_dx, want_grads) = block_reference_backward(&cache, &su.w, &d_out).unwrap();

    for &(p, u) in &[(1usize, 1usize), (1, 4), (2, 2), (2, 4), (4, 2)] {
        let (out, mut stores, _) = run_fpdt_forward(&su, p, u);
        let d_out_ranks = shuffle_hidden(&d_out, p, u).unwrap();
        let mut ledger = HbmLedger::new();
        let back =
            fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger)
                .unwrap();
        let got_dx = unshuffle_hidden(&back.d_hidden, u).unwrap();
        let dx_diff = got_dx.max_abs_diff(&want_dx);
        assert!(dx_diff < 1e-8, "p={p} u={u} d_hidden diff={dx_diff}");

        let total = reduce_block_grads(&back.grads, &su.w).unwrap();
        for (got, want, name) in [
            (&total.d_wqkv, &want_grads.d_wqkv, "wqkv"),
            (&total.d_wo, &want_grads.d_wo, "wo"),
            (&total.d_wffn1, &want_grads.d_wffn1, "wffn1"),
            (&total.d_wffn2, &want_grads.d_wffn2, "wffn2"),
        ] {
            let diff = got.max_abs_diff(want);
            assert!(diff < 1e-8, "p={p} u={u} {name} diff={diff}");
        }
    }
}

#[test]
fn backward_zero_upstream_gives_zero_grads() {
    let su = setup(107, 32, 2, 4, 16, 5);
    let (out, mut stores, _) = run_fpdt_forward(&su, 2, 4);
    let zeros = ChunkTensor::zeros(su.x.dims, Layout::SeqLocalHeadsGlobal);
    let d_out_ranks = shuffle_hidden(&zeros, 2, 4).unwrap();
    let mut ledger = HbmLedger::new();
    let back =
        fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger).unwrap();
    for t in &back.d_hidden {
        assert!(t.data().iter().all(|&x| x == 0.0));
    }
    let total = reduce_block_grads(&back.grads, &su.w).unwrap();
    for m in [&total.d_wqkv, &total.d_wo, &total.d_wffn1, &total.d_wffn2] {
        assert!(m.data.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn backward_weight_grads_match_finite_differences() {
    let su = setup(108, 16, 2, 4, 12, 5);
    let p = 2;
    let u = 4;
    let mut rng = Rng::new(109);
    let probe = ChunkTensor::random(su.x.dims, Layout::SeqLocalHeadsGlobal, &mut rng);

    // Scalar loss through the monolithic reference; independent of the
    // chunked path whose gradients are being checked.
    let loss = |w: &BlockWeights| -> f64 {
        let o = block_reference_forward(&su.x, w).unwrap();
        o.data().iter().zip(probe.data().iter()).map(|(a, b)| a * b).sum()
    };

    let (out, mut stores, _) = run_fpdt_forward(&su, p, u);
    let d_out_ranks = shuffle_hidden(&probe, p, u).unwrap();
    let mut ledger = HbmLedger::new();
    let back =
        fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger).unwrap();
    let total = reduce_block_grads(&back.grads, &su.w).unwrap();

    let eps = 1e-5;
    let mut pick = Rng::new(110);
    let mut checked = 0;
    for (name, gm) in [
        ("wqkv", &total.d_wqkv),
        ("wo", &total.d_wo),
        ("wffn1", &total.d_wffn1),
        ("wffn2", &total.d_wffn2),
    ] {
        for _ in 0..4 {
            let idx = pick.next_below(gm.data.len() as u64) as usize;
            let bump = |delta: f64| {
                let mut w2 = su.w.clone();
                let m = match name {
                    "wqkv" => &mut w2.wqkv,
                    "wo" => &mut w2.wo,
                    "wffn1" => &mut w2.wffn1,
                    _ => &mut w2.wffn2,
                };
                m.data[idx] += delta;
                loss(&w2)
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let a = gm.data[idx];
            assert!(
                (fd - a).abs() < 1e-5 * a.abs().max(fd.abs()) + 1e-8,
                "{name} idx={idx} fd={fd} analytic={a}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 10);
}

#[test]
fn backward_epoch_audit_follows_schedule() {
    let su = setup(111, 32, 2, 4, 16, 5);
    let u = 4;
    let (out, mut stores, _) = run_fpdt_forward(&su, 2, u);
    let mut rng = Rng::new(112);
    let d_out = ChunkTensor::random(su.x.dims, Layout::SeqLocalHeadsGlobal, &mut rng);
    let d_out_ranks = shuffle_hidden(&d_out, 2, u).unwrap();
    let mut ledger = HbmLedger::new();
    let back =
        fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger).unwrap();
    for audit in &back.audits {
        for j in 0..u {
            assert!(audit.dk_write_epochs[j].iter().all(|&e| e == j));
            assert!(audit.dv_write_epochs[j].iter().all(|&e| e == j));
            assert_eq!(audit.dq_write_epochs[j].last().copied(), Some(j));
        }
    }
}

#[test]
fn ffn_chunk_count_bitwise_invariant() {
    let su = setup(113, 16, 2, 4, 24, 5);
    let chunks = vec![su.x.clone()];
    let a = chunked_ffn(&chunks, &su.w, 1, None).unwrap();
    let b = chunked_ffn(&chunks, &su.w, 8, None).unwrap();
    assert_eq!(a[0].data(), b[0].data());
}

#[test]
fn ffn_zero_input_zero_output() {
    let su = setup(114, 8, 2, 4, 16, 5);
    let zeros = ChunkTensor::zeros(su.x.dims, Layout::SeqLocalHeadsGlobal);
    let out = chunked_ffn(&[zeros], &su.w, 4, None).unwrap();
    assert!(out[0].data().iter().all(|&x| x == 0.0));
}

#[test]
fn ffn_matches_monolithic_oracle() {
    let su = setup(115, 16, 2, 4, 24, 5);
    // Monolithic FFN oracle, written directly against the weights.
    let x_m = su.x.to_matrix();
    let z1 = fpdt_core::matmul(&x_m, &su.w.wffn1).unwrap();
    let mut a1 = z1;
    for v in &mut a1.data {
        *v = fpdt_core::block::gelu(*v);
    }
    let want = fpdt_core::matmul(&a1, &su.w.wffn2).unwrap();

    let chunks = su.x.split_seq(4).unwrap();
    let got_chunks = chunked_ffn(&chunks, &su.w, 8, None).unwrap();
    let got = ChunkTensor::concat_seq(&got_chunks).unwrap();
    assert_eq!(got.to_matrix().data, want.data);
}

#[test]
fn ffn_rejects_bad_divisibility() {
    let su = setup(116, 6, 1, 2, 4, 3);
    let chunks = su.x.split_seq(2).unwrap(); // chunks of 3 tokens
    assert!(chunked_ffn(&chunks, &su.w, 4, None).is_err()); // factor 2 on 3 tokens
    assert!(chunked_ffn(&chunks, &su.w, 3, None).is_err()); // 3 % 2 != 0
}

#[test]
fn loss_head_uniform_logits() {
    let dims = Dims::new(1, 6, 1, 2);
    let hidden = ChunkTensor::zeros(dims, Layout::SeqLocalHeadsGlobal);
    let wvocab = Matrix::zeros(2, 2);
    let labels = vec![0usize, 1, 1, 0, 1, 0];
    let out = chunked_loss_head(&[hidden], &wvocab, &labels, 2, 6, None).unwrap();
    assert!((out.loss - (2.0f64).ln()).abs() < 1e-12);
}

#[test]
fn loss_head_chunk_count_invariant() {
    let su = setup(117, 16, 2, 4, 16, 9);
    let mut rng = Rng::new(118);
    let labels: Vec<usize> = (0..16).map(|_| rng.next_below(9) as usize).collect();
    let chunks = su.x.split_seq(2).unwrap();
    let a = chunked_loss_head(&chunks, &su.w.wvocab, &labels, 1, 16, None).unwrap();
    let b = chunked_loss_head(&chunks, &su.w.wvocab, &labels, 8, 16, None).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (x, y) in a.d_hidden_chunks.iter().zip(&b.d_hidden_chunks) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn loss_head_matches_monolithic_reference() {
    let su = setup(119, 16, 2, 4, 16, 9);
    let mut rng = Rng::new(120);
    let labels: Vec<usize> = (0..16).map(|_| rng.next_below(9) as usize).collect();
    let want = loss_reference(&su.x, &su.w.wvocab, &labels).unwrap();
    let chunks = su.x.split_seq(4).unwrap();
    let got = chunked_loss_head(&chunks, &su.w.wvocab, &labels, 6, 16, None).unwrap();
    assert_eq!(got.per_token, want.per_token);
    assert!((got.loss - want.loss).abs() < 1e-12);
    let got_dh = ChunkTensor::concat_seq(&got.d_hidden_chunks).unwrap();
    assert_eq!(got_dh.data(), want.d_hidden.data());
    assert!(got.d_wvocab.max_abs_diff(&want.d_wvocab) < 1e-12);
}

#[test]
fn loss_invariant_under_shuffle_exactly() {
    // Shuffle tokens + labels, compute the loss rank by rank, reassemble the
    // per-token CE in canonical order: equals the unshuffled monolithic loss
    // bit for bit.
    let su = setup(121, 32, 2, 4, 16, 7);
    let (p, u) = (4, 2);
    let mut rng = Rng::new(122);
    let labels: Vec<usize> = (0..32).map(|_| rng.next_below(7) as usize).collect();
    let want = loss_reference(&su.x, &su.w.wvocab, &labels).unwrap();

    let hidden_ranks = shuffle_hidden(&su.x, p, u).unwrap();
    let label_ranks = shuffle_tokens(&labels, p, u).unwrap();
    let total = 32;
    let mut rank_ce = Vec::new();
    let mut rank_dh = Vec::new();
    for r in 0..p {
        let chunks = hidden_ranks[r].split_seq(u).unwrap();
        let out =
            chunked_loss_head(&chunks, &su.w.wvocab, &label_ranks[r], 3, total, None).unwrap();
        rank_ce.push(out.per_token.clone());
        rank_dh.push(ChunkTensor::concat_seq(&out.d_hidden_chunks).unwrap());
    }
    // Canonical global order: unshuffle the per-token CE, sum in order.
    let global_ce = unshuffle_tokens(&rank_ce, u).unwrap();
    let loss: f64 = global_ce.iter().sum::<f64>() / total as f64;
    assert_eq!(loss, want.loss);
    assert_eq!(global_ce, want.per_token);
    let got_dh = unshuffle_hidden(&rank_dh, u).unwrap();
    assert_eq!(got_dh.data(), want.d_hidden.data());
}

#[test]
fn loss_head_transient_bounded_by_chunk_size() {
    let su = setup(123, 16, 2, 4, 16, 9);
    let mut rng = Rng::new(124);
    let labels: Vec<usize> = (0..16).map(|_| rng.next_below(9) as usize).collect();
    let chunks = su.x.split_seq(2).unwrap();
    let u_loss = 4;
    let mut ledger = HbmLedger::new();
    ledger.set_phase("loss");
    chunked_loss_head(&chunks, &su.w.wvocab, &labels, u_loss, 16, Some(&mut ledger)).unwrap();
    let tokens = 16usize;
    let bound = (tokens.div_ceil(u_loss) * su.w.vocab()) as u64 * 8;
    assert!(ledger.phase_peak("loss") <= bound, "peak={} bound={bound}", ledger.phase_peak("loss"));
}

#[test]
fn ffn_phase_peak_bounded_by_attention_phase_peak() {
    // With u_ffn = 2 * u_attn the attention step must bind the footprint,
    // in the forward and the backward.
    let su = setup(125, 64, 4, 4, 32, 9);
    let (out, mut stores, ledger) = run_fpdt_forward(&su, 2, 4);
    let attn = ledger.phase_peak("fwd:attn");
    let ffn = ledger.phase_peak("fwd:ffn");
    assert!(ffn <= attn, "fwd: ffn={ffn} attn={attn}");

    let mut rng = Rng::new(126);
    let d_out = ChunkTensor::random(su.x.dims, Layout::SeqLocalHeadsGlobal, &mut rng);
    let d_out_ranks = shuffle_hidden(&d_out, 2, 4).unwrap();
    let mut bwd_ledger = HbmLedger::new();
    fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut bwd_ledger).unwrap();
    let attn = bwd_ledger.phase_peak("bwd:attn");
    let ffn = bwd_ledger.phase_peak("bwd:ffn");
    assert!(ffn <= attn, "bwd: ffn={ffn} attn={attn}");
}

#[test]
fn residency_highwater_one_through_block_passes() {
    let su = setup(126, 64, 4, 4, 32, 9);
    let (out, mut stores, _) = run_fpdt_forward(&su, 2, 4);
    let mut rng = Rng::new(127);
    let d_out = ChunkTensor::random(su.x.dims, Layout::SeqLocalHeadsGlobal, &mut rng);
    let d_out_ranks = shuffle_hidden(&d_out, 2, 4).unwrap();
    let mut ledger = HbmLedger::new();
    fpdt_block_backward(&out.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger).unwrap();
    for s in &stores {
        assert_eq!(s.ledger().hbm_checkout_highwater, 1);
    }
}

#[test]
fn full_training_step_matches_reference_chain() {
    // Compose everything: block forward, chunked loss head, gradient of the
    // loss back through the block. Catches any scaling mismatch between the
    // loss head's 1/T factor and the distributed backward.
    let su = setup(400, 32, 4, 4, 24, 9);
    let (p, u) = (2usize, 4usize);
    let total_tokens = 32;
    let mut rng = Rng::new(401);
    let labels: Vec<usize> = (0..total_tokens).map(|_| rng.next_below(9) as usize).collect();

    // Reference chain.
    let (ref_out, cache) = block_reference_forward_cached(&su.x, &su.w).unwrap();
    let ref_loss = loss_reference(&ref_out, &su.w.wvocab, &labels).unwrap();
    let (ref_dx, ref_grads) = block_reference_backward(&cache, &su.w, &ref_loss.d_hidden).unwrap();

    // Chunked distributed chain.
    let group = RankGroup::from_global(&su.x, p, u).unwrap();
    let plan = ChunkPlanExec::with_defaults(u, su.w.vocab(), su.w.hidden());
    let mut stores: Vec<OfflStore> = (0..p).map(|_| OfflStore::unbounded()).collect();
    let mut hbm = fpdt_core::block::HbmLedger::new();
    let fwd = fpdt_block_forward(&group, &su.w, &plan, &mut stores, &mut hbm, 0).unwrap();

    let label_ranks = shuffle_tokens(&labels, p, u).unwrap();
    let mut d_out_ranks = Vec::with_capacity(p);
    let mut rank_ce = Vec::with_capacity(p);
    let mut d_wvocab_total = Matrix::zeros(su.w.hidden(), su.w.vocab());
    for r in 0..p {
        let chunks = fwd.outputs[r].split_seq(u).unwrap();
        let loss = chunked_loss_head(
            &chunks,
            &su.w.wvocab,
            &label_ranks[r],
            plan.u_loss,
            total_tokens,
            None,
        )
        .unwrap();
        rank_ce.push(loss.per_token.clone());
        d_wvocab_total.add_assign(&loss.d_wvocab).unwrap();
        d_out_ranks.push(ChunkTensor::concat_seq(&loss.d_hidden_chunks).unwrap());
    }
    // Canonical-order loss reduction across ranks.
    let global_ce = unshuffle_tokens(&rank_ce, u).unwrap();
    let loss: f64 = global_ce.iter().sum::<f64>() / total_tokens as f64;
    assert!((loss - ref_loss.loss).abs() < 1e-12);
    assert!(d_wvocab_total.max_abs_diff(&ref_loss.d_wvocab) < 1e-10);

    let mut ledger = fpdt_core::block::HbmLedger::new();
    let back =
        fpdt_block_backward(&fwd.saved, &su.w, &d_out_ranks, &mut stores, &mut ledger).unwrap();
    let got_dx = unshuffle_hidden(&back.d_hidden, u).unwrap();
    assert!(got_dx.max_abs_diff(&ref_dx) < 1e-10, "d_x diff {}", got_dx.max_abs_diff(&ref_dx));
    let total = reduce_block_grads(&back.grads, &su.w).unwrap();
    for (got, want) in [
        (&total.d_wqkv, &ref_grads.d_wqkv),
        (&total.d_wo, &ref_grads.d_wo),
        (&total.d_wffn1, &ref_grads.d_wffn1),
        (&total.d_wffn2, &ref_grads.d_wffn2),
    ] {
        assert!(got.max_abs_diff(want) < 1e-10);
    }
}

#[test]
fn batched_forward_and_backward_match_reference() {
    // b = 2 exercises the batch axis through the projections, Alltoall,
    // attention, and gradient plumbing.
    let mut rng = Rng::new(500);
    let dims = Dims::new(2, 32, 4, 4);
    let x = ChunkTensor::random(dims, Layout::SeqLocalHeadsGlobal, &mut rng);
    let w = BlockWeights::random(16, 24, 7, &mut rng);
    let d_out = ChunkTensor::random(dims, Layout::SeqLocalHeadsGlobal, &mut rng);

    let (want_out, cache) = block_reference_forward_cached(&x, &w).unwrap();
    let (want_dx, want_grads) = block_reference_backward(&cache, &w, &d_out).unwrap();

    let (p, u) = (2usize, 4usize);
    let group = RankGroup::from_global(&x, p, u).unwrap();
    let plan = ChunkPlanExec::with_defaults(u, 7, 16);
    let mut stores: Vec<OfflStore> = (0..p).map(|_| OfflStore::unbounded()).collect();
    let mut ledger = HbmLedger::new();
    let fwd = fpdt_block_forward(&group, &w, &plan, &mut stores, &mut ledger, 0).unwrap();
    let got_out = unshuffle_hidden(&fwd.outputs, u).unwrap();
    assert!(got_out.max_abs_diff(&want_out) < 1e-9);

    let d_out_ranks = shuffle_hidden(&d_out, p, u).unwrap();
    let mut bwd_ledger = HbmLedger::new();
    let back = fpdt_block_backward(&fwd.saved, &w, &d_out_ranks, &mut stores, &mut bwd_ledger).unwrap();
    let got_dx = unshuffle_hidden(&back.d_hidden, u).unwrap();
    assert!(got_dx.max_abs_diff(&want_dx) < 1e-8);
    let total = reduce_block_grads(&back.grads, &w).unwrap();
    assert!(total.d_wqkv.max_abs_diff(&want_grads.d_wqkv) < 1e-8);
    assert!(total.d_wffn2.max_abs_diff(&want_grads.d_wffn2) < 1e-8);
}
