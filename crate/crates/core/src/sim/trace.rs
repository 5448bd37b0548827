//! Chrome trace-event export for simulated timelines.
//!
//! Emits the JSON array format: one complete ("ph": "X") event per op with
//! microsecond timestamps, one pid per simulated device and one tid per
//! stream. Ranks are symmetric, so every device shows the same schedule;
//! load the file in a trace viewer (chrome://tracing, Perfetto) to inspect
//! overlap.

use serde_json::{json, Value};

use crate::sim::{OpKind, Timeline};

fn stream_name(stream: usize) -> &'static str {
    match stream {
        0 => "compute",
        1 => "htod",
        _ => "dtoh",
    }
}

fn op_name(e: &crate::sim::SimEvent) -> String {
    let kind = match e.kind {
        OpKind::AttnFwd => "attn_fwd",
        OpKind::AttnBwd => "attn_bwd",
        OpKind::A2a => "a2a",
        OpKind::HtoD => "htod",
        OpKind::DtoH => "dtoh",
        OpKind::Proj => "proj",
        OpKind::Ffn => "ffn",
    };
    match (e.q_chunk, e.kv_chunk) {
        (Some(q), Some(kv)) => format!("{kind}[q{q},kv{kv}]"),
        (Some(q), None) => format!("{kind}[c{q}]"),
        (None, Some(kv)) => format!("{kind}[kv{kv}]"),
        (None, None) => kind.to_string(),
    }
}

/// Render a timeline as Chrome trace-event JSON, duplicating the schedule
/// across `devices` pids.
pub fn to_chrome_trace(t: &Timeline, devices: usize) -> Value {
    let mut out = Vec::new();
    for pid in 0..devices.max(1) {
        for (tid, name) in [(0, "compute"), (1, "htod"), (2, "dtoh")] {
            out.push(json!({
                "name": "thread_name",
                "ph": "M",
                "pid": pid,
                "tid": tid,
                "args": {"name": name},
            }));
        }
        for e in &t.events {
            out.push(json!({
                "name": op_name(e),
                "cat": stream_name(e.stream),
                "ph": "X",
                "pid": pid,
                "tid": e.stream,
                "ts": e.t_start * 1e6,
                "dur": (e.t_end - e.t_start) * 1e6,
                "args": {
                    "bytes": e.bytes,
                    "flops": e.flops,
                },
            }));
        }
    }
    Value::Array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::ModelDims;
    use crate::sim::{simulate, HardwareProfile, Pass, SimPlan};

    #[test]
    fn trace_has_event_per_op_per_device() {
        let model = ModelDims {
            layers: 1,
            hidden: 1024,
            heads: 8,
            head_dim: 128,
            ffn_dim: 4096,
            vocab: 32000,
        };
        let plan = SimPlan {
            p: 2,
            u: 2,
            chunk_tokens: 2048,
            s_global: 4096,
            batch: 1,
            double_buffer: true,
            sparsity: 0.0,
            sparsity_seed: 0,
            pass: Pass::Forward,
        };
        let t = simulate(&plan, &model, &HardwareProfile::default()).unwrap();
        let trace = to_chrome_trace(&t, plan.p);
        let arr = trace.as_array().unwrap();
        // 3 metadata rows + events, per device.
        assert_eq!(arr.len(), plan.p * (3 + t.events.len()));
        assert!(arr.iter().any(|e| e["ph"] == "X"));
        // Timestamps are microseconds and non-negative.
        for e in arr.iter().filter(|e| e["ph"] == "X") {
            assert!(e["ts"].as_f64().unwrap() >= 0.0);
            assert!(e["dur"].as_f64().unwrap() > 0.0);
        }
    }
}
