//! Command-line front end: verification, memory reports, pipeline
//! simulation, chunk-size sweeps, and the compute/fetch crossover.
//!
//! Exit codes: 0 on success, 1 when a verification tolerance fails, 2 on
//! configuration or usage errors.

mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpdt_core::config::RunConfig;
use fpdt_core::memory::{activation_peak, chunk_plan, max_seq_len, model_state_bytes, StepCoeffs};
use fpdt_core::sim::trace::to_chrome_trace;
use fpdt_core::sim::{crossover_chunk_size, simulate, sweep_chunk_size, Pass, SimPlan};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fpdt", version, about = "Chunked offload pipeline verifier and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpt {
    /// Config file (TOML). Falls back to $FPDT_CONFIG, then built-in
    /// defaults.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration (defaults included) and exit.
    #[arg(long)]
    explain: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the chunked-vs-monolithic oracle suites and print a JSON verdict.
    Verify {
        #[command(flatten)]
        config: ConfigOpt,
        /// Base seed for the verification grid.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated sequence lengths overriding the config grid.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Include the offload-store ledger in the verdict.
        #[arg(long)]
        stats: bool,
    },
    /// Per-step activation/memory breakdown for the configured model.
    MemReport {
        #[command(flatten)]
        config: ConfigOpt,
        /// Write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the full ledger as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Simulate one pipeline schedule.
    Simulate {
        #[command(flatten)]
        config: ConfigOpt,
        /// Global tokens per chunk (default: s_global / u_attn).
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long, default_value = "on", value_parser = parse_on_off, action = clap::ArgAction::Set)]
        double_buffer: bool,
        /// Fraction of causally valid KV blocks dropped.
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        #[arg(long, default_value_t = 7)]
        sparsity_seed: u64,
        /// fwd, bwd, or both.
        #[arg(long, default_value = "both", value_parser = parse_pass)]
        pass: Pass,
        /// Write the timeline in Chrome trace-event JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep chunk sizes: MFU and peak HBM per size.
    Sweep {
        #[command(flatten)]
        config: ConfigOpt,
        /// Comma-separated chunk sizes (default: powers of two from 8192 up
        /// to s_global).
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Write rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compute/fetch crossover chunk size under the configured hardware.
    Crossover {
        #[command(flatten)]
        config: ConfigOpt,
    },
    /// Largest power-of-two sequence length that fits the budgets.
    MaxLen {
        #[command(flatten)]
        config: ConfigOpt,
        /// Also compute the non-offloading baseline and the ratio.
        #[arg(long)]
        compare_offload: bool,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on/off, got {other}")),
    }
}

fn parse_pass(s: &str) -> Result<Pass, String> {
    match s {
        "fwd" | "forward" => Ok(Pass::Forward),
        "bwd" | "backward" => Ok(Pass::Backward),
        "both" => Ok(Pass::Both),
        other => Err(format!("expected fwd|bwd|both, got {other}")),
    }
}

fn load_config(opt: &ConfigOpt) -> anyhow::Result<RunConfig> {
    let path = opt
        .config
        .clone()
        .or_else(|| std::env::var_os("FPDT_CONFIG").map(PathBuf::from));
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Verify {
            config,
            seed,
            sizes,
            stats,
        } => {
            let cfg = load_config(&config)?;
            if config.explain {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let mut grid = cfg.verify.clone();
            if let Some(sizes) = sizes {
                grid.sizes = sizes;
            }
            let verdict = verify::run_verify(&cfg, &grid, seed, stats)?;
            let pass = verdict["pass"].as_bool().unwrap_or(false);
            println!("{}", serde_json::to_string_pretty(&verdict)?);
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::MemReport { config, csv, json } => {
            let cfg = load_config(&config)?;
            if config.explain {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let train = cfg.train_config()?;
            let coeffs = StepCoeffs::default();
            let ledger = activation_peak(&train, &coeffs);
            let plan = chunk_plan(&train);

            // Coefficient table echoed verbatim in the header.
            let header = format!(
                "# coeffs fwd: hidden=1 qkv_proj=3 all2all=4 attention=4 ffn=4 other=3\n\
                 # coeffs bwd: hidden=2 qkv_proj=6 all2all=4 attention=8 ffn=8 other=0\n\
                 # config_hash={} u_attn={} u_ffn={} u_loss={}",
                cfg.hash(),
                plan.u_attn,
                plan.u_ffn,
                plan.u_loss
            );
            println!("{header}");
            println!("{:<12} {:>16} {:>16}", "step", "forward_bytes", "backward_bytes");
            for row in &ledger.step_bytes {
                println!(
                    "{:<12} {:>16} {:>16}",
                    format!("{:?}", row.step),
                    row.forward,
                    row.backward
                );
            }
            println!(
                "peak_activation={} model_state={} cross_layer={} (on_host={}) host_used={} headroom={}",
                ledger.peak_activation_bytes,
                ledger.model_state_bytes,
                ledger.cross_layer_bytes,
                ledger.cross_layer_on_host,
                ledger.host_bytes_used,
                ledger.headroom_bytes
            );
            if let Some(path) = csv {
                let mut out = String::from(
                    "# coeffs fwd: hidden=1 qkv_proj=3 all2all=4 attention=4 ffn=4 other=3\n\
                     # coeffs bwd: hidden=2 qkv_proj=6 all2all=4 attention=8 ffn=8 other=0\n\
                     step,forward_bytes,backward_bytes\n",
                );
                for row in &ledger.step_bytes {
                    out.push_str(&format!("{:?},{},{}\n", row.step, row.forward, row.backward));
                }
                std::fs::write(path, out)?;
            }
            if let Some(path) = json {
                let doc = json!({
                    "format": "fpdt-mem-report/1",
                    "config_hash": cfg.hash(),
                    "coeffs": coeffs,
                    "chunk_plan": {"u_attn": plan.u_attn, "u_ffn": plan.u_ffn, "u_loss": plan.u_loss},
                    "ledger": ledger,
                });
                std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            config,
            chunk,
            double_buffer,
            sparsity,
            sparsity_seed,
            pass,
            trace,
        } => {
            let cfg = load_config(&config)?;
            if config.explain {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let train = cfg.train_config()?;
            let profile = cfg.hardware_profile()?;
            let chunk = chunk.unwrap_or(train.seq.s_global / train.u_attn);
            if chunk == 0 || train.seq.s_global % chunk != 0 {
                anyhow::bail!(
                    "chunk {chunk} does not divide s_global {}",
                    train.seq.s_global
                );
            }
            let plan = SimPlan {
                p: train.parallel.p,
                u: train.seq.s_global / chunk,
                chunk_tokens: chunk,
                s_global: train.seq.s_global,
                batch: train.seq.batch,
                double_buffer,
                sparsity,
                sparsity_seed,
                pass,
            };
            let t = simulate(&plan, &train.model, &profile)?;
            fpdt_core::sim::validate_timeline(&t)?;
            if let Some(path) = trace {
                let doc = to_chrome_trace(&t, plan.p);
                std::fs::write(path, serde_json::to_string(&doc)?)?;
            }
            let summary = json!({
                "format": "fpdt-simulate/1",
                "config_hash": cfg.hash(),
                "plan": plan,
                "makespan_s": t.makespan,
                "mfu": t.mfu,
                "busy_s": {"compute": t.busy[0], "htod": t.busy[1], "dtoh": t.busy[2]},
                "useful_flops": t.useful_flops,
                "hbm_highwater_bytes": t.hbm_highwater_bytes,
                "events": t.events.len(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, sizes, csv } => {
            let cfg = load_config(&config)?;
            if config.explain {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let train = cfg.train_config()?;
            let profile = cfg.hardware_profile()?;
            let sizes = sizes.unwrap_or_else(|| {
                let mut v = Vec::new();
                let mut c = 8192usize.min(train.seq.s_global);
                while c <= train.seq.s_global {
                    if train.seq.s_global % c == 0 {
                        v.push(c);
                    }
                    c *= 2;
                }
                v
            });
            let (rows, argmax) = sweep_chunk_size(&train, &profile, &sizes)?;
            println!("# config_hash={}", cfg.hash());
            println!("chunk_tokens,u,mfu,makespan_s,peak_hbm_bytes");
            for r in &rows {
                println!(
                    "{},{},{:.6},{:.6},{}",
                    r.chunk_tokens, r.u, r.mfu, r.makespan, r.peak_hbm_bytes
                );
            }
            println!(
                "# argmax chunk_tokens={} mfu={:.6}",
                rows[argmax].chunk_tokens, rows[argmax].mfu
            );
            if let Some(path) = csv {
                let mut out = String::from("chunk_tokens,u,mfu,makespan_s,peak_hbm_bytes\n");
                for r in &rows {
                    out.push_str(&format!(
                        "{},{},{:.6},{:.6},{}\n",
                        r.chunk_tokens, r.u, r.mfu, r.makespan, r.peak_hbm_bytes
                    ));
                }
                std::fs::write(path, out)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Crossover { config } => {
            let cfg = load_config(&config)?;
            if config.explain {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let train = cfg.train_config()?;
            let profile = cfg.hardware_profile()?;
            let c = crossover_chunk_size(&profile, &train.model, train.parallel.p)?;
            let doc = json!({
                "format": "fpdt-crossover/1",
                "config_hash": cfg.hash(),
                "crossover_tokens": c,
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::MaxLen {
            config,
            compare_offload,
        } => {
            let cfg = load_config(&config)?;
            if config.explain {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let train = cfg.train_config()?;
            let coeffs = StepCoeffs::default();
            let with = max_seq_len(&train, &coeffs)?;
            let mut doc = json!({
                "format": "fpdt-maxlen/1",
                "config_hash": cfg.hash(),
                "max_seq_len": with,
                "model_state_bytes": model_state_bytes(&train),
            });
            if compare_offload {
                let mut baseline = train.clone();
                baseline.strategies.offload_enabled = false;
                let without = max_seq_len(&baseline, &coeffs)?;
                doc["max_seq_len_no_offload"] = json!(without);
                doc["ratio"] = json!(with as f64 / without as f64);
            }
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
