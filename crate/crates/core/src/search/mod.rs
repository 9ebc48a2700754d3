//! The search loop: fit the surrogate on the history, pick the next
//! architecture with a simulated-annealing tree search over morphisms, and
//! hand it to an evaluator.

mod acquisition;
mod diagnostic;
mod runner;
mod state;

pub use acquisition::{
    acquisition, max_iterations, optimize_acquisition, AcquisitionResult, Proposal, Surrogate,
    TreeParams,
};
pub use diagnostic::{kernel_diagnostic, matrix_csv, normalize_unit, KernelDiagnostic};
pub use runner::{propose, run, RunSummary, StepReport};
pub use state::{SearchState, HISTORY_FILE, KERNEL_FILE, MODELS_DIR, PLOT_FILE, STATE_FILE};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluators::{
    EvalStatus, Evaluator, EvaluatorError, ExternalConfig, ExternalEvaluator, OracleEvaluator,
    DEFAULT_MAX_EPOCHS, DEFAULT_TAU,
};
use crate::graph::{ArchGraph, BuildError, TensorShape};
use crate::morph::MorphOp;

/// How the next architecture is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Gaussian-process surrogate with the annealed tree search.
    #[default]
    Bayesian,
    /// One random morphism of a uniformly chosen observed architecture.
    Random,
    /// Children of observed architectures in the order they were observed.
    Bfs,
}

/// `"oracle"` or `{"command": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvaluatorSpec {
    Named(String),
    External(ExternalConfig),
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Named("oracle".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub beta: f64,
    pub lambda: f64,
    pub t_low: f64,
    pub r: f64,
    pub max_children: usize,
    /// Upper bound on a candidate's estimated footprint, bytes.
    pub memory_bound: u64,
    pub time_budget_s: Option<f64>,
    /// Evaluations per invocation, not counting the initial architecture.
    pub eval_budget: u32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub input_shape: [u32; 3],
    pub num_classes: u32,
    /// Batch size used for memory estimates.
    pub batch: u64,
    pub max_epochs: u32,
    pub tau: u32,
    pub gp_noise: f64,
    /// Generate the next candidate while the current one is evaluated.
    pub pipeline: bool,
    /// Annealed acceptance in the tree search; off accepts every child.
    pub anneal: bool,
    pub strategy: Strategy,
    pub evaluator: EvaluatorSpec,
    pub oracle_noise: bool,
    /// Oracle reports out-of-memory above this estimate (testing aid).
    pub oracle_oom_above: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beta: 2.5,
            lambda: 1.0,
            t_low: 1e-3,
            r: 0.9,
            max_children: crate::morph::DEFAULT_MAX_CHILDREN,
            memory_bound: 2 << 30,
            time_budget_s: None,
            eval_budget: 30,
            seed: 0,
            output_dir: None,
            input_shape: [32, 32, 3],
            num_classes: 10,
            batch: 64,
            max_epochs: DEFAULT_MAX_EPOCHS,
            tau: DEFAULT_TAU,
            gp_noise: crate::gp::DEFAULT_NOISE,
            pipeline: true,
            anneal: true,
            strategy: Strategy::Bayesian,
            evaluator: EvaluatorSpec::default(),
            oracle_noise: true,
            oracle_oom_above: None,
        }
    }
}

impl SearchConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::Config(m));
        if !(self.r > 0.0 && self.r < 1.0) {
            return bad(format!("r must lie in (0, 1), got {}", self.r));
        }
        if !(self.t_low > 0.0) {
            return bad(format!("t_low must be positive, got {}", self.t_low));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.gp_noise >= 0.0) {
            return bad(format!("gp_noise must be non-negative, got {}", self.gp_noise));
        }
        if self.max_children == 0 {
            return bad("max_children must be at least 1".into());
        }
        if self.tau == 0 || self.max_epochs < self.tau {
            return bad(format!(
                "need 1 <= tau <= max_epochs, got tau {} and max_epochs {}",
                self.tau, self.max_epochs
            ));
        }
        if let EvaluatorSpec::Named(n) = &self.evaluator {
            if n != "oracle" {
                return bad(format!("unknown evaluator {n:?}"));
            }
        }
        if let EvaluatorSpec::External(e) = &self.evaluator {
            if e.command.is_empty() {
                return bad("evaluator command is empty".into());
            }
        }
        let g = self.initial_graph()?;
        let need = g.estimate_memory(self.batch);
        if need > self.memory_bound {
            return bad(format!(
                "memory bound {} is below the initial architecture's estimate {need}",
                self.memory_bound
            ));
        }
        Ok(())
    }

    pub fn initial_graph(&self) -> Result<ArchGraph, SearchError> {
        let [h, w, c] = self.input_shape;
        ArchGraph::default_cnn(TensorShape::new(h, w, c), self.num_classes)
            .map_err(|e: BuildError| SearchError::Config(format!("initial architecture: {e}")))
    }

    pub fn build_evaluator(&self) -> Box<dyn Evaluator> {
        match &self.evaluator {
            EvaluatorSpec::Named(_) => Box::new(OracleEvaluator {
                noise: self.oracle_noise,
                oom_above: self.oracle_oom_above,
                batch: self.batch,
            }),
            EvaluatorSpec::External(e) => Box::new(ExternalEvaluator::new(e.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub arch_id: u64,
    pub graph: ArchGraph,
    /// Observed cost; absent for failed or out-of-memory evaluations.
    pub cost: Option<f64>,
    pub epoch_trace: Vec<(u32, f64)>,
    pub parent_id: Option<u64>,
    pub ops_from_parent: Vec<MorphOp>,
    /// Seconds reported by the evaluator.
    pub wall_time: f64,
    #[serde(flatten)]
    pub status: EvalStatus,
    /// Acquisition value when the candidate was chosen, if a surrogate was used.
    pub acquisition: Option<f64>,
}

impl HistoryRecord {
    pub fn ok_cost(&self) -> Option<f64> {
        match self.status {
            EvalStatus::Ok => self.cost,
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Evaluator(#[from] EvaluatorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: {reason}")]
    State { file: PathBuf, reason: String },
    #[error(transparent)]
    Kernel(#[from] crate::kernel::KernelError),
    #[error(transparent)]
    Gp(#[from] crate::gp::GpError),
    #[error("memory bound {bound} fell below the initial architecture's estimate {need}")]
    MemoryBound { bound: u64, need: u64 },
}
