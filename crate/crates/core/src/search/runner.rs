use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::acquisition::{optimize_acquisition, Proposal, Surrogate, TreeParams};
use super::{HistoryRecord, SearchError, SearchState, Strategy};
use crate::evaluators::{EvalRequest, EvalResult, EvalStatus, Evaluator, EvaluatorError};
use crate::graph::ArchGraph;
use crate::morph::sample_children;

/// Keeps the breadth-first streams apart from the per-step streams.
const BFS_STREAM_OFFSET: u64 = 1 << 40;
const RANDOM_PARENT_TRIES: usize = 32;

/// Random stream for generating `arch_id`.
fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Candidate for `arch_id`, generated from the first `prefix` records.
///
/// Candidates must fit the memory bound implied by those records and must
/// differ from every recorded graph and from `inflight`. Returns `None` when
/// nothing can be generated.
pub fn propose(
    state: &SearchState,
    arch_id: u64,
    prefix: usize,
    inflight: Option<&ArchGraph>,
) -> Result<Option<Proposal>, SearchError> {
    let cfg = state.config();
    let prefix = prefix.min(state.history().len());
    let bound = state.memory_bound(prefix);
    let inflight_hash = inflight.map(ArchGraph::structural_hash);
    let fits = |g: &ArchGraph| g.estimate_memory(cfg.batch) <= bound;
    let fresh = |g: &ArchGraph| {
        let h = g.structural_hash();
        !state.is_known(h) && Some(h) != inflight_hash
    };
    let accept = |g: &ArchGraph| fits(g) && fresh(g);
    let observed = state.observed(prefix);
    let mut rng = step_rng(cfg.seed, arch_id);

    let strategy = if observed.is_empty() { Strategy::Random } else { cfg.strategy };
    match strategy {
        Strategy::Bayesian => {
            let costs: Vec<f64> = observed.iter().map(|r| r.cost.expect("observed")).collect();
            let distance = state.distance().truncated(observed.len())?;
            let surrogate = Surrogate::fit(distance, &costs, cfg.beta, cfg.gp_noise)?;
            let params = TreeParams {
                t_low: cfg.t_low,
                r: cfg.r,
                max_children: cfg.max_children,
                anneal: cfg.anneal,
            };
            let res = optimize_acquisition(&observed, &surrogate, &params, &accept, &mut rng);
            if !res.best.ops.is_empty() {
                return Ok(Some(res.best));
            }
            Ok(res.best_generated)
        }
        Strategy::Random => {
            let pool: Vec<&HistoryRecord> = if observed.is_empty() {
                state.history()[..prefix].iter().collect()
            } else {
                observed
            };
            for _ in 0..RANDOM_PARENT_TRIES {
                let Some(parent) = pool.choose(&mut rng) else {
                    break;
                };
                if let Some((op, graph)) = sample_children(&parent.graph, &mut rng, 1, &accept).pop() {
                    return Ok(Some(Proposal {
                        parent_id: parent.arch_id,
                        ops: vec![op],
                        graph,
                        score: f64::NAN,
                    }));
                }
            }
            Ok(None)
        }
        Strategy::Bfs => {
            for parent in observed {
                let mut rng = step_rng(cfg.seed, BFS_STREAM_OFFSET + parent.arch_id);
                let kids = sample_children(&parent.graph, &mut rng, cfg.max_children, &fits);
                if let Some((op, graph)) = kids.into_iter().find(|(_, g)| fresh(g)) {
                    return Ok(Some(Proposal {
                        parent_id: parent.arch_id,
                        ops: vec![op],
                        graph,
                        score: f64::NAN,
                    }));
                }
            }
            Ok(None)
        }
    }
}

/// What a finished evaluation looked like, for progress output.
#[derive(Debug)]
pub struct StepReport<'a> {
    pub record: &'a HistoryRecord,
    pub best: Option<&'a HistoryRecord>,
    /// Wall-clock time since `run` started.
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Evaluations in this invocation, including the initial architecture.
    pub evaluated: u32,
    pub best: Option<(u64, f64)>,
    pub interrupted: bool,
    /// Stopped because no new candidate could be generated.
    pub exhausted: bool,
}

/// History prefix used to generate `arch_id`. With pipelining the previous
/// candidate is still being evaluated, so its result is not used.
fn prefix_for(state: &SearchState, arch_id: u64) -> usize {
    let a = arch_id as usize;
    if state.config().pipeline { a.saturating_sub(1).max(1) } else { a }
}

/// Generates `arch_id` as the pipelined schedule would, then regenerates from
/// the full history if an out-of-memory result since then lowered the bound
/// below the candidate's estimate.
fn next_candidate(
    state: &SearchState,
    arch_id: u64,
    early: Option<Proposal>,
) -> Result<Option<Proposal>, SearchError> {
    let cand = match early {
        Some(c) => Some(c),
        None => propose(state, arch_id, prefix_for(state, arch_id), None)?,
    };
    let bound = state.memory_bound(state.history().len());
    match cand {
        Some(c) if c.graph.estimate_memory(state.config().batch) > bound => {
            propose(state, arch_id, state.history().len(), None)
        }
        other => Ok(other),
    }
}

fn to_record(state: &SearchState, cand: Option<&Proposal>, graph: ArchGraph, res: EvalResult) -> HistoryRecord {
    let uses_surrogate = state.config().strategy == Strategy::Bayesian;
    HistoryRecord {
        arch_id: res.arch_id,
        graph,
        cost: match res.status {
            EvalStatus::Ok => res.cost,
            _ => None,
        },
        epoch_trace: res.epoch_trace,
        parent_id: cand.map(|c| c.parent_id),
        ops_from_parent: cand.map(|c| c.ops.clone()).unwrap_or_default(),
        wall_time: res.elapsed_s,
        status: res.status,
        acquisition: cand.filter(|c| uses_surrogate && c.score.is_finite()).map(|c| c.score),
    }
}

/// Runs the search until the evaluation or time budget is spent, `stop` is
/// raised, or no candidate can be generated.
///
/// With `dir`, every record is persisted as soon as it is observed. A fresh
/// state first evaluates the initial architecture.
pub fn run(
    state: &mut SearchState,
    evaluator: Box<dyn Evaluator>,
    dir: Option<&Path>,
    stop: &AtomicBool,
    on_step: &mut dyn FnMut(&StepReport<'_>),
) -> Result<RunSummary, SearchError> {
    let start = Instant::now();
    let cfg = state.config().clone();
    let need = cfg.initial_graph()?.estimate_memory(cfg.batch);
    let (req_tx, req_rx) = mpsc::sync_channel::<EvalRequest>(1);
    let (res_tx, res_rx) = mpsc::channel::<Result<EvalResult, EvaluatorError>>();

    thread::scope(|scope| {
        // Owned here so any early return hangs up on the evaluator thread.
        let req_tx = req_tx;
        scope.spawn(move || {
            let mut evaluator = evaluator;
            for req in req_rx {
                let r = evaluator.evaluate(&req);
                let failed = r.is_err();
                if res_tx.send(r).is_err() || failed {
                    break;
                }
            }
        });

        let mut summary = RunSummary {
            evaluated: 0,
            best: None,
            interrupted: false,
            exhausted: false,
        };
        let request = |arch_id: u64, graph: &ArchGraph| EvalRequest {
            arch_id,
            graph: graph.clone(),
            max_epochs: cfg.max_epochs,
            tau: cfg.tau,
            seed: cfg.seed,
        };
        let mut observe = |state: &mut SearchState,
                           cand: Option<&Proposal>,
                           graph: ArchGraph,
                           summary: &mut RunSummary|
         -> Result<(), SearchError> {
            let res = res_rx.recv().map_err(|_| EvaluatorError::Crashed(None))??;
            let rec = to_record(state, cand, graph, res);
            state.push(rec)?;
            if let Some(d) = dir {
                state.persist_last(d)?;
            }
            summary.evaluated += 1;
            on_step(&StepReport {
                record: state.history().last().expect("just pushed"),
                best: state.best(),
                elapsed: start.elapsed(),
            });
            let bound = state.memory_bound(state.history().len());
            if bound < need {
                return Err(SearchError::MemoryBound { bound, need });
            }
            Ok(())
        };

        if state.history().is_empty() {
            let g = cfg.initial_graph()?;
            req_tx.send(request(0, &g)).map_err(|_| EvaluatorError::Crashed(None))?;
            observe(state, None, g, &mut summary)?;
        }

        let mut early: Option<Proposal> = None;
        let mut done = 0u32;
        loop {
            let out_of_time = cfg.time_budget_s.is_some_and(|t| start.elapsed().as_secs_f64() >= t);
            if done >= cfg.eval_budget || out_of_time {
                break;
            }
            if stop.load(Ordering::SeqCst) {
                summary.interrupted = true;
                break;
            }
            let arch_id = state.next_arch_id();
            let Some(cand) = next_candidate(state, arch_id, early.take())? else {
                summary.exhausted = true;
                break;
            };
            req_tx
                .send(request(arch_id, &cand.graph))
                .map_err(|_| EvaluatorError::Crashed(None))?;
            done += 1;
            if cfg.pipeline && done < cfg.eval_budget {
                early = propose(state, arch_id + 1, prefix_for(state, arch_id + 1), Some(&cand.graph))?;
            }
            let graph = cand.graph.clone();
            observe(state, Some(&cand), graph, &mut summary)?;
        }
        drop(req_tx);
        summary.best = state.best().map(|r| (r.arch_id, r.cost.expect("observed")));
        Ok(summary)
    })
}
