//! Analytical DRAM weight-traffic model.
//!
//! Assumes no weight survives in cache from one block to the next, and counts
//! weight bytes only (activations are `O(L·d)` against `O(d²)` per block).
//! SRU and QRNN fetch every weight once per block; the LSTM partial
//! precompute fetches `W` and the biases once per block but `U` once per step.

use serde::{Deserialize, Serialize};

use crate::blocked::{plan_blocks, Phase, Trace};
use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::model::{param_split, RnnConfig};
use crate::numeric::Precision;

pub const MODEL_ASSUMPTIONS: &str = "weight traffic only; cold cache at every block boundary; activations not counted";

/// Total weight bytes of `cfg` (parameters × element size).
pub fn weight_bytes(cfg: &RnnConfig) -> Result<u64> {
    Ok(param_split(cfg)?.total() * cfg.precision.bytes() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficReport {
    pub cell: CellKind,
    pub d_h: usize,
    pub precision: Precision,
    pub seq_len: usize,
    pub block_size: usize,
    pub weight_bytes: u64,
    /// Bytes fetched once per block (input-side matrices and biases).
    pub blocked_bytes: u64,
    /// Bytes fetched once per step (LSTM recurrent matrices; zero otherwise).
    pub per_step_bytes: u64,
    pub blocks: usize,
    pub est_weight_traffic: u64,
    pub per_step_traffic: f64,
    pub ratio_vs_t1: f64,
    pub assumptions: &'static str,
}

impl TrafficReport {
    pub fn row(&self) -> TrafficRow {
        TrafficRow {
            cell: self.cell,
            d_h: self.d_h,
            precision: self.precision,
            seq_len: self.seq_len,
            block: self.block_size,
            weight_bytes: self.weight_bytes,
            blocks: self.blocks,
            est_traffic_bytes: self.est_weight_traffic,
            ratio_vs_t1: self.ratio_vs_t1,
        }
    }
}

/// CSV row form of a [`TrafficReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub cell: CellKind,
    pub d_h: usize,
    pub precision: Precision,
    #[serde(rename = "L")]
    pub seq_len: usize,
    #[serde(rename = "T")]
    pub block: usize,
    pub weight_bytes: u64,
    pub blocks: usize,
    pub est_traffic_bytes: u64,
    #[serde(rename = "ratio_vs_T1")]
    pub ratio_vs_t1: f64,
}

fn traffic_for(blocked: u64, per_step: u64, blocks: u64, seq_len: u64) -> u64 {
    blocked * blocks + per_step * seq_len
}

pub fn estimate_traffic(cfg: &RnnConfig, seq_len: usize, block_size: usize) -> Result<TrafficReport> {
    let plan = plan_blocks(seq_len, block_size)?;
    let split = param_split(cfg)?;
    let elem = cfg.precision.bytes() as u64;
    let blocked_bytes = split.input * elem;
    let per_step_bytes = split.recurrent * elem;
    let blocks = plan.len();
    let est = traffic_for(blocked_bytes, per_step_bytes, blocks as u64, seq_len as u64);
    let est_t1 = traffic_for(blocked_bytes, per_step_bytes, seq_len as u64, seq_len as u64);
    Ok(TrafficReport {
        cell: cfg.kind,
        d_h: cfg.d_h,
        precision: cfg.precision,
        seq_len,
        block_size,
        weight_bytes: blocked_bytes + per_step_bytes,
        blocked_bytes,
        per_step_bytes,
        blocks,
        est_weight_traffic: est,
        per_step_traffic: est as f64 / seq_len as f64,
        ratio_vs_t1: est as f64 / est_t1 as f64,
        assumptions: MODEL_ASSUMPTIONS,
    })
}

/// Limit of `ratio_vs_t1` as the block size grows without bound.
pub fn ratio_floor(cfg: &RnnConfig) -> Result<f64> {
    let split = param_split(cfg)?;
    Ok(split.recurrent as f64 / split.total() as f64)
}

/// Agreement between a traffic report and an executor trace, in elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceComparison {
    pub model_elements: u64,
    pub traced_elements: u64,
    /// Matrix elements read by the traced calls (`Σ m·k`).
    pub matrix_elements: u64,
    /// Bias elements folded into the traced calls.
    pub bias_elements: u64,
}

/// Checks that the weight elements touched by `trace` equal the model's
/// estimate, phase by phase; the first disagreeing phase is reported.
pub fn validate_against_trace(report: &TrafficReport, trace: &Trace) -> Result<TraceComparison> {
    let elem = report.precision.bytes() as u64;
    let phases = [
        (
            Phase::GatePrecompute,
            report.blocked_bytes / elem * report.blocks as u64,
        ),
        (Phase::Recurrent, report.per_step_bytes / elem * report.seq_len as u64),
    ];
    let mut cmp = TraceComparison {
        model_elements: 0,
        traced_elements: 0,
        matrix_elements: 0,
        bias_elements: 0,
    };
    for (phase, expected) in phases {
        let calls = trace.entries.iter().filter(|e| e.phase == phase);
        let found: u64 = calls.clone().map(|e| e.weight_elements()).sum();
        if found != expected {
            return Err(Error::TraceMismatch {
                phase: phase.name().to_string(),
                expected,
                found,
            });
        }
        cmp.model_elements += expected;
        cmp.traced_elements += found;
        cmp.matrix_elements += calls.clone().map(|e| (e.m * e.k) as u64).sum::<u64>();
        cmp.bias_elements += calls.map(|e| e.bias as u64).sum::<u64>();
    }
    Ok(cmp)
}
