use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HistoryRecord, SearchConfig, SearchError};
use crate::evaluators::EvalStatus;
use crate::kernel::DistanceState;

pub const STATE_FILE: &str = "state.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const KERNEL_FILE: &str = "kernel-state.json";
pub const MODELS_DIR: &str = "models";
pub const PLOT_FILE: &str = "plot.csv";

const STATE_VERSION: u32 = 1;
const PLOT_HEADER: &str = "step,arch_id,cost,best_cost,elapsed_s\n";
/// An out-of-memory report caps the bound at this fraction of the graph's estimate.
const OOM_SHRINK: f64 = 0.9;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    version: u32,
    config: SearchConfig,
    next_arch_id: u64,
    memory_bound: u64,
    best_arch_id: Option<u64>,
    best_cost: Option<f64>,
}

/// History plus everything derived from it.
///
/// Every derived quantity (distance state, memory bound, per-step random
/// streams) is a function of the configuration and the history, so a
/// reloaded state continues exactly where the original left off.
#[derive(Debug, Clone)]
pub struct SearchState {
    config: SearchConfig,
    history: Vec<HistoryRecord>,
    /// Over the records with a cost, in arch-id order.
    distance: DistanceState,
    observed: Vec<usize>,
    hashes: HashSet<u64>,
}

impl SearchState {
    pub fn new(config: SearchConfig) -> Result<Self, SearchError> {
        config.validate()?;
        let distance = DistanceState::new(config.seed, config.lambda);
        Ok(SearchState {
            config,
            history: Vec::new(),
            distance,
            observed: Vec::new(),
            hashes: HashSet::new(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    /// Settings that may change between invocations without affecting the
    /// history: budgets and the output directory.
    pub fn set_budget(&mut self, eval_budget: u32, time_budget_s: Option<f64>) {
        self.config.eval_budget = eval_budget;
        self.config.time_budget_s = time_budget_s;
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    pub fn distance(&self) -> &DistanceState {
        &self.distance
    }

    pub fn next_arch_id(&self) -> u64 {
        self.history.len() as u64
    }

    /// Records with a cost among the first `prefix` records.
    pub fn observed(&self, prefix: usize) -> Vec<&HistoryRecord> {
        self.observed
            .iter()
            .take_while(|&&i| i < prefix)
            .map(|&i| &self.history[i])
            .collect()
    }

    pub fn is_known(&self, structural_hash: u64) -> bool {
        self.hashes.contains(&structural_hash)
    }

    pub fn best(&self) -> Option<&HistoryRecord> {
        self.observed
            .iter()
            .map(|&i| &self.history[i])
            .min_by(|a, b| {
                a.cost
                    .unwrap()
                    .total_cmp(&b.cost.unwrap())
                    .then(a.arch_id.cmp(&b.arch_id))
            })
    }

    /// Memory bound implied by the first `prefix` records.
    pub fn memory_bound(&self, prefix: usize) -> u64 {
        self.history[..prefix.min(self.history.len())]
            .iter()
            .filter(|r| matches!(r.status, EvalStatus::Oom { .. }))
            .map(|r| (OOM_SHRINK * r.graph.estimate_memory(self.config.batch) as f64) as u64)
            .fold(self.config.memory_bound, u64::min)
    }

    pub fn push(&mut self, rec: HistoryRecord) -> Result<(), SearchError> {
        if rec.arch_id != self.next_arch_id() {
            return Err(SearchError::State {
                file: HISTORY_FILE.into(),
                reason: format!("expected arch_id {}, found {}", self.next_arch_id(), rec.arch_id),
            });
        }
        if rec.ok_cost().is_some() {
            self.distance = self.distance.extend(rec.graph.summary())?;
            self.observed.push(self.history.len());
        }
        self.hashes.insert(rec.graph.structural_hash());
        self.history.push(rec);
        Ok(())
    }

    /// Creates `dir` for a fresh run. Refuses a directory that already holds one.
    pub fn create_dir(&self, dir: &Path) -> Result<(), SearchError> {
        if dir.join(STATE_FILE).exists() {
            return Err(SearchError::Config(format!(
                "{} already contains a search; resume it or pick another directory",
                dir.display()
            )));
        }
        fs::create_dir_all(dir.join(MODELS_DIR)).map_err(io(dir))?;
        write_file(&dir.join(HISTORY_FILE), "")?;
        write_file(&dir.join(PLOT_FILE), PLOT_HEADER)?;
        for rec in &self.history {
            self.append_files(dir, rec)?;
        }
        self.write_snapshot(dir)
    }

    /// Appends `rec` to the history files in `dir` and refreshes the snapshots.
    pub fn persist_last(&self, dir: &Path) -> Result<(), SearchError> {
        let rec = self.history.last().expect("a record to persist");
        self.append_files(dir, rec)?;
        self.write_snapshot(dir)
    }

    fn append_files(&self, dir: &Path, rec: &HistoryRecord) -> Result<(), SearchError> {
        let line = serde_json::to_string(rec).expect("records serialize");
        append_line(&dir.join(HISTORY_FILE), &line)?;

        let i = rec.arch_id as usize;
        let best = self.history[..=i].iter().filter_map(HistoryRecord::ok_cost).reduce(f64::min);
        let elapsed: f64 = self.history[..=i].iter().map(|r| r.wall_time).sum();
        let fmt = |c: Option<f64>| c.map(|c| c.to_string()).unwrap_or_default();
        let row = format!("{i},{},{},{},{elapsed}", rec.arch_id, fmt(rec.ok_cost()), fmt(best));
        append_line(&dir.join(PLOT_FILE), &row)?;

        let model = dir.join(MODELS_DIR).join(format!("arch_{}.json", rec.arch_id));
        write_file(&model, &rec.graph.to_json())
    }

    fn write_snapshot(&self, dir: &Path) -> Result<(), SearchError> {
        let best = self.best();
        let doc = StateDoc {
            version: STATE_VERSION,
            config: self.config.clone(),
            next_arch_id: self.next_arch_id(),
            memory_bound: self.memory_bound(self.history.len()),
            best_arch_id: best.map(|r| r.arch_id),
            best_cost: best.and_then(|r| r.cost),
        };
        let text = serde_json::to_string_pretty(&doc).expect("state serializes");
        write_atomic(&dir.join(STATE_FILE), &text)?;
        write_atomic(&dir.join(KERNEL_FILE), &self.distance.to_json())
    }

    /// Reloads a run directory, checking the three files agree.
    pub fn load(dir: &Path) -> Result<Self, SearchError> {
        let state_path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&state_path).map_err(io(&state_path))?;
        let doc: StateDoc = serde_json::from_str(&text).map_err(|e| bad(&state_path, e))?;
        if doc.version != STATE_VERSION {
            return Err(bad(&state_path, format!("unsupported version {}", doc.version)));
        }
        let mut state = SearchState::new(doc.config)?;

        let hist_path = dir.join(HISTORY_FILE);
        let file = File::open(&hist_path).map_err(io(&hist_path))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(&hist_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: HistoryRecord =
                serde_json::from_str(&line).map_err(|e| bad(&hist_path, format!("line {}: {e}", n + 1)))?;
            state.push(rec).map_err(|e| bad(&hist_path, e))?;
        }
        if state.next_arch_id() != doc.next_arch_id {
            return Err(bad(
                &state_path,
                format!(
                    "records {} history lines but next_arch_id is {}",
                    state.next_arch_id(),
                    doc.next_arch_id
                ),
            ));
        }

        let kernel_path = dir.join(KERNEL_FILE);
        let text = fs::read_to_string(&kernel_path).map_err(io(&kernel_path))?;
        let saved = DistanceState::from_json(&text).map_err(|e| bad(&kernel_path, e))?;
        if saved.seed() != state.distance.seed()
            || saved.lambda() != state.distance.lambda()
            || saved.archive() != state.distance.archive()
        {
            return Err(bad(&kernel_path, "does not match the history"));
        }
        state.distance = saved;
        Ok(state)
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> SearchError + '_ {
    move |source| SearchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(file: &Path, reason: impl ToString) -> SearchError {
    SearchError::State {
        file: file.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), SearchError> {
    fs::write(path, text).map_err(io(path))
}

fn write_atomic(path: &Path, text: &str) -> Result<(), SearchError> {
    let tmp: PathBuf = path.with_extension("tmp");
    write_file(&tmp, text)?;
    fs::rename(&tmp, path).map_err(io(path))
}

fn append_line(path: &Path, line: &str) -> Result<(), SearchError> {
    let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(io(path))?;
    writeln!(f, "{line}").map_err(io(path))
}
