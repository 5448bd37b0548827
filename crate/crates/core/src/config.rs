//! Run-configuration files: TOML with fixed sections, schema-validated with
//! unknown keys rejected. Every field has a documented default, and the
//! resolved config (defaults filled in) can be re-serialized for `--explain`
//! and hashed for provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::{Budgets, ModelDims, ParallelConfig, SeqConfig, Strategies, TrainConfig};
use crate::sim::{HardwareProfile, HtodStrategy};

fn d_layers() -> usize { 32 }
fn d_hidden() -> usize { 4096 }
fn d_heads() -> usize { 32 }
fn d_head_dim() -> usize { 128 }
fn d_ffn_dim() -> usize { 16384 }
fn d_vocab() -> usize { 50304 }
fn d_seq_len() -> usize { 1 << 18 }
fn d_batch() -> usize { 1 }
fn d_dtype_bytes() -> usize { 2 }
fn d_bytes_per_param() -> f64 { 16.0 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub dtype_bytes: usize,
    pub bytes_per_param_total: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: d_layers(),
            hidden: d_hidden(),
            heads: d_heads(),
            head_dim: d_head_dim(),
            ffn_dim: d_ffn_dim(),
            vocab: d_vocab(),
            seq_len: d_seq_len(),
            batch: d_batch(),
            dtype_bytes: d_dtype_bytes(),
            bytes_per_param_total: d_bytes_per_param(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelSection {
    pub p: usize,
    pub shard_degree: usize,
}

impl Default for ParallelSection {
    fn default() -> Self {
        ParallelSection { p: 4, shard_degree: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunksSection {
    pub u_attn: usize,
}

impl Default for ChunksSection {
    fn default() -> Self {
        ChunksSection { u_attn: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareSection {
    pub peak_flops: f64,
    pub flop_efficiency: f64,
    pub nvlink_bw: f64,
    pub pcie_bw: f64,
    pub pcie_sharing: usize,
    pub internode_bw: f64,
    pub fixed_latency: f64,
    pub train_dtype_bytes: usize,
    pub devices_per_node: usize,
    /// "per_device" or "fetch_then_scatter".
    pub htod_strategy: String,
    pub bwd_flop_ratio: f64,
}

impl Default for HardwareSection {
    fn default() -> Self {
        let p = HardwareProfile::default();
        HardwareSection {
            peak_flops: p.peak_flops,
            flop_efficiency: p.flop_efficiency,
            nvlink_bw: p.nvlink_bw,
            pcie_bw: p.pcie_bw,
            pcie_sharing: p.pcie_sharing,
            internode_bw: p.internode_bw,
            fixed_latency: p.fixed_latency,
            train_dtype_bytes: p.train_dtype_bytes,
            devices_per_node: p.devices_per_node,
            htod_strategy: "per_device".to_string(),
            bwd_flop_ratio: p.bwd_flop_ratio,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategiesSection {
    pub activation_checkpoint: bool,
    pub checkpoint_offload: bool,
    pub offload_enabled: bool,
    /// Calibration multiplier on modeled HBM activation bytes.
    pub activation_multiplier: f64,
}

impl Default for StrategiesSection {
    fn default() -> Self {
        StrategiesSection {
            activation_checkpoint: true,
            checkpoint_offload: true,
            offload_enabled: true,
            activation_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetsSection {
    pub hbm_gb: f64,
    pub host_gb: f64,
}

impl Default for BudgetsSection {
    fn default() -> Self {
        BudgetsSection {
            hbm_gb: 80.0,
            host_gb: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesSection {
    pub forward_max_abs: f64,
    pub backward_max_abs: f64,
    pub fd_rel: f64,
}

impl Default for TolerancesSection {
    fn default() -> Self {
        TolerancesSection {
            forward_max_abs: 1e-9,
            backward_max_abs: 1e-8,
            fd_rel: 1e-5,
        }
    }
}

/// Desk-scale grid for the oracle verification suites.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub seeds: u64,
    pub sizes: Vec<usize>,
    pub ranks: Vec<usize>,
    pub chunks: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            seeds: 5,
            sizes: vec![32, 64, 128],
            ranks: vec![1, 2, 4],
            chunks: vec![1, 2, 4, 8],
            heads: 4,
            head_dim: 4,
            ffn_dim: 32,
            vocab: 13,
        }
    }
}

/// A full run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub parallel: ParallelSection,
    pub chunks: ChunksSection,
    pub hardware: HardwareSection,
    pub strategies: StrategiesSection,
    pub budgets: BudgetsSection,
    pub tolerances: TolerancesSection,
    pub verify: VerifySection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model.seq_len.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} is not a power of two (only power-of-two sequence lengths are supported)",
                self.model.seq_len
            )));
        }
        self.train_config()?.validate()?;
        self.hardware_profile()?.validate()?;
        for &s in &self.verify.sizes {
            for &p in &self.verify.ranks {
                for &u in &self.verify.chunks {
                    if s % (p * u) != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "verify size {s} not divisible by p*u = {}",
                            p * u
                        )));
                    }
                }
                if self.verify.heads % p != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "verify heads {} not divisible by p {p}",
                        self.verify.heads
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: ModelDims {
                layers: self.model.layers,
                hidden: self.model.hidden,
                heads: self.model.heads,
                head_dim: self.model.head_dim,
                ffn_dim: self.model.ffn_dim,
                vocab: self.model.vocab,
            },
            seq: SeqConfig {
                s_global: self.model.seq_len,
                batch: self.model.batch,
            },
            parallel: ParallelConfig {
                p: self.parallel.p,
                shard_degree: self.parallel.shard_degree,
            },
            u_attn: self.chunks.u_attn,
            dtype_bytes: self.model.dtype_bytes,
            strategies: Strategies {
                activation_checkpoint: self.strategies.activation_checkpoint,
                checkpoint_offload: self.strategies.checkpoint_offload,
                offload_enabled: self.strategies.offload_enabled,
            },
            budgets: Budgets {
                hbm_bytes: (self.budgets.hbm_gb * 1e9) as u64,
                host_bytes: (self.budgets.host_gb * 1e9) as u64,
            },
            bytes_per_param_total: self.model.bytes_per_param_total,
            activation_multiplier: self.strategies.activation_multiplier,
        })
    }

    pub fn hardware_profile(&self) -> Result<HardwareProfile> {
        let strategy = match self.hardware.htod_strategy.as_str() {
            "per_device" => HtodStrategy::PerDevice,
            "fetch_then_scatter" => HtodStrategy::FetchThenScatter,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown htod_strategy {other:?} (expected per_device or fetch_then_scatter)"
                )))
            }
        };
        Ok(HardwareProfile {
            peak_flops: self.hardware.peak_flops,
            flop_efficiency: self.hardware.flop_efficiency,
            nvlink_bw: self.hardware.nvlink_bw,
            pcie_bw: self.hardware.pcie_bw,
            pcie_sharing: self.hardware.pcie_sharing,
            internode_bw: self.hardware.internode_bw,
            fixed_latency: self.hardware.fixed_latency,
            train_dtype_bytes: self.hardware.train_dtype_bytes,
            devices_per_node: self.hardware.devices_per_node,
            htod_strategy: strategy,
            bwd_flop_ratio: self.hardware.bwd_flop_ratio,
        })
    }

    /// Short provenance hash of the resolved config.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
