//! Observation: turning an architecture into a cost.
//!
//! Every evaluator streams a per-epoch validation metric (lower is better)
//! and the engine applies one early-stop policy, [`early_stop_estimate`].

mod external;
mod oracle;
pub mod protocol;

pub use external::{ExternalConfig, ExternalEvaluator};
pub use oracle::{oracle_cost, OracleEvaluator};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ArchGraph;

pub const DEFAULT_TAU: u32 = 5;
pub const DEFAULT_MAX_EPOCHS: u32 = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub arch_id: u64,
    pub graph: ArchGraph,
    pub max_epochs: u32,
    pub tau: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Oom { estimated_bytes: u64 },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub arch_id: u64,
    /// Present iff the status is `Ok`.
    pub cost: Option<f64>,
    /// `(epoch, val_metric)`, epochs counted from 1.
    pub epoch_trace: Vec<(u32, f64)>,
    pub status: EvalStatus,
    /// Time the evaluator reports for this job, in seconds.
    pub elapsed_s: f64,
}

impl EvalResult {
    pub fn failed(arch_id: u64, reason: impl Into<String>, trace: Vec<(u32, f64)>, elapsed_s: f64) -> Self {
        EvalResult {
            arch_id,
            cost: None,
            epoch_trace: trace,
            status: EvalStatus::Failed {
                reason: reason.into(),
            },
            elapsed_s,
        }
    }
}

/// Failures that leave the evaluator unusable. Per-architecture problems
/// (timeouts, bad lines, trainer-reported errors) are `EvalStatus::Failed`.
#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("cannot start evaluator `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("evaluator process exited unexpectedly{}", .0.as_deref().map(|s| format!(": {s}")).unwrap_or_default())]
    Crashed(Option<String>),
    #[error("evaluator i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Evaluator: Send {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResult, EvaluatorError>;
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResult, EvaluatorError> {
        (**self).evaluate(req)
    }
}

/// Incremental form of [`early_stop_estimate`].
#[derive(Debug, Clone)]
pub struct EarlyStop {
    tau: u32,
    values: Vec<f64>,
    best: f64,
    best_epoch: u32,
}

impl EarlyStop {
    pub fn new(tau: u32) -> Self {
        EarlyStop {
            tau: tau.max(1),
            values: Vec::new(),
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the next epoch's value; true once `tau` epochs have passed
    /// without a strictly new minimum.
    pub fn push(&mut self, v: f64) -> bool {
        self.values.push(v);
        let epoch = self.values.len() as u32;
        if v < self.best {
            self.best = v;
            self.best_epoch = epoch;
        }
        epoch - self.best_epoch >= self.tau
    }

    pub fn epochs(&self) -> u32 {
        self.values.len() as u32
    }

    /// Mean of the last `tau` values (all of them if fewer).
    pub fn cost(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let k = (self.tau as usize).min(self.values.len());
        let tail = &self.values[self.values.len() - k..];
        Some(tail.iter().sum::<f64>() / k as f64)
    }
}

/// Stops at the first epoch `e` with no new strict minimum in `(e - tau, e]`
/// and reports the mean of the last `tau` values up to `e`. Returns
/// `(stop_epoch, cost)`; without an early stop `stop_epoch` is the trace length.
pub fn early_stop_estimate(trace: &[f64], tau: u32) -> (u32, f64) {
    assert!(!trace.is_empty(), "empty trace");
    let mut s = EarlyStop::new(tau);
    for &v in trace {
        if s.push(v) {
            break;
        }
    }
    (s.epochs(), s.cost().expect("non-empty"))
}
