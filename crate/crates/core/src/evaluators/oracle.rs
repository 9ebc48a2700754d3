//! Deterministic synthetic cost landscape for desk-scale searches.
//!
//! The optimum is eight main-chain convolutions of width 128 with at least
//! four skip-connections:
//!
//! ```text
//! c = clamp(0.5 |n_c - 8| / 8 + 0.3 min(W, 1) + 0.2 max(0, 1 - n_s / 4)
//!           + 0.01 noise, 0, 1)
//! ```
//!
//! where `W` is the mean of `|log2(width) - 7| / 7` over the convolutions.

use super::{early_stop_estimate, EvalRequest, EvalResult, EvalStatus, Evaluator, EvaluatorError};
use crate::graph::{ArchGraph, LayerKind};
use crate::hash::{mix64, stable_hash};

const TRACE_EPOCHS: u32 = 10;
const DECAY_EPOCHS: u32 = 4;
/// Simulated seconds per epoch, reported as elapsed time.
const EPOCH_SECONDS: f64 = 0.01;

/// Oracle cost of `g`; `noise` toggles the hash-derived perturbation.
pub fn oracle_cost(g: &ArchGraph, seed: u64, noise: bool) -> f64 {
    let widths: Vec<u32> = g
        .main_chain()
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
        .map(|l| l.width)
        .collect();
    let n_skips = g.skip_set().len();
    let n_c = widths.len() as f64;
    let w = if widths.is_empty() {
        1.0
    } else {
        widths
            .iter()
            .map(|&x| (f64::from(x).log2() - 7.0).abs() / 7.0)
            .sum::<f64>()
            / n_c
    };
    let mut c = 0.5 * (n_c - 8.0).abs() / 8.0
        + 0.3 * w.min(1.0)
        + 0.2 * (1.0 - n_skips as f64 / 4.0).max(0.0);
    if noise {
        let h = stable_hash(&(&widths, n_skips));
        c += 0.01 * unit_noise(h, seed);
    }
    c.clamp(0.0, 1.0)
}

/// Uniform in [0, 1) from a structure hash and a seed.
fn unit_noise(h: u64, seed: u64) -> f64 {
    (mix64(h ^ mix64(seed)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Evaluator backed by [`oracle_cost`]. Emits a ten-epoch trace that decays
/// geometrically onto the cost, so the early-stop path is exercised.
#[derive(Debug, Clone)]
pub struct OracleEvaluator {
    pub noise: bool,
    /// Report out-of-memory for graphs whose estimate exceeds this many bytes.
    pub oom_above: Option<u64>,
    pub batch: u64,
}

impl Default for OracleEvaluator {
    fn default() -> Self {
        OracleEvaluator {
            noise: true,
            oom_above: None,
            batch: 64,
        }
    }
}

impl OracleEvaluator {
    pub fn trace(cost: f64, max_epochs: u32) -> Vec<(u32, f64)> {
        (1..=TRACE_EPOCHS.min(max_epochs.max(1)))
            .map(|e| {
                let v = if e <= DECAY_EPOCHS {
                    cost + (1.0 - cost) * 0.5f64.powi(e as i32)
                } else {
                    cost
                };
                (e, v)
            })
            .collect()
    }
}

impl Evaluator for OracleEvaluator {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResult, EvaluatorError> {
        if let Some(limit) = self.oom_above {
            let need = req.graph.estimate_memory(self.batch);
            if need > limit {
                return Ok(EvalResult {
                    arch_id: req.arch_id,
                    cost: None,
                    epoch_trace: Vec::new(),
                    status: EvalStatus::Oom {
                        estimated_bytes: need,
                    },
                    elapsed_s: 0.0,
                });
            }
        }
        let c = oracle_cost(&req.graph, req.seed, self.noise);
        let full = Self::trace(c, req.max_epochs);
        let values: Vec<f64> = full.iter().map(|&(_, v)| v).collect();
        let (stop, cost) = early_stop_estimate(&values, req.tau);
        let trace = full[..stop as usize].to_vec();
        Ok(EvalResult {
            arch_id: req.arch_id,
            cost: Some(cost),
            elapsed_s: EPOCH_SECONDS * f64::from(stop),
            epoch_trace: trace,
            status: EvalStatus::Ok,
        })
    }
}
