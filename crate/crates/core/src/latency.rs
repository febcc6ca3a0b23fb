//! Per-round and cumulative latency arithmetic.
//!
//! A round costs a BPSK downlink broadcast, local compute, and the per-layer
//! PSK uplink. The uplink term is the only one the planner can influence, via
//! the modulation order chosen for each layer.

use crate::error::{Error, Result};
use crate::planner::ModulationPlan;

/// Local compute cost model: `V` samples per round, `C` cycles per sample,
/// `f_clock` cycles per second.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComputeConfig {
    pub v_samples: f64,
    pub c_cycles_per_sample: f64,
    pub f_clock: f64,
}

impl ComputeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_samples > 0.0 && self.c_cycles_per_sample > 0.0 && self.f_clock > 0.0) {
            return Err(Error::config(format!(
                "compute config must be positive: V={} C={} f={}",
                self.v_samples, self.c_cycles_per_sample, self.f_clock
            )));
        }
        Ok(())
    }
}

/// One round's latency, split by phase.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyBreakdown {
    pub t_d: f64,
    pub t_c: f64,
    pub t_u: f64,
    pub t_round: f64,
}

impl LatencyBreakdown {
    pub fn new(t_d: f64, t_c: f64, t_u: f64) -> Self {
        LatencyBreakdown {
            t_d,
            t_c,
            t_u,
            t_round: t_d + t_c + t_u,
        }
    }
}

/// Downlink broadcast time for `d` parameters of `n_bits` bits over a BPSK
/// link of bandwidth `b_d`: `D·N / (2·B_d)`.
pub fn downlink_latency(d: usize, n_bits: u32, b_d: f64) -> f64 {
    assert!(d > 0 && n_bits > 0 && b_d > 0.0);
    (d as f64) * f64::from(n_bits) / (2.0 * b_d)
}

/// Uplink time for one client: `Σ_k D_k·N / (2·B_u·log2 M_k)`.
pub fn uplink_latency(layer_sizes: &[usize], plan: &ModulationPlan, n_bits: u32, b_u: f64) -> Result<f64> {
    if plan.levels.len() != layer_sizes.len() {
        return Err(Error::schema(format!(
            "plan covers {} layers but schema has {}",
            plan.levels.len(),
            layer_sizes.len()
        )));
    }
    assert!(b_u > 0.0 && n_bits > 0);
    let mut total = 0.0;
    for (&d_k, &m) in layer_sizes.iter().zip(&plan.levels) {
        let bits_per_symbol = f64::from(m).log2();
        total += (d_k as f64) * f64::from(n_bits) / (2.0 * b_u * bits_per_symbol);
    }
    Ok(total)
}

/// Local compute time: `V·C / f_clock`.
pub fn compute_latency(cc: &ComputeConfig) -> f64 {
    cc.v_samples * cc.c_cycles_per_sample / cc.f_clock
}

/// Total latency across rounds.
pub fn accumulate(rounds: &[LatencyBreakdown]) -> f64 {
    rounds.iter().map(|r| r.t_round).sum()
}
