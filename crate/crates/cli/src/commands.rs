use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use morphnas_core::evaluators::EvalStatus;
use morphnas_core::kernel::distance_parts;
use morphnas_core::morph::{apply_sequence, MorphOp};
use morphnas_core::search::{
    kernel_diagnostic, matrix_csv, run, SearchConfig, SearchError, SearchState, StepReport, Strategy, MODELS_DIR,
};
use morphnas_core::{ArchGraph, TensorShape};

use crate::SearchArgs;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, input file or run directory.
    Config(String),
    /// The evaluator failed; the run directory holds everything observed so far.
    Evaluator(String),
    Morph(String),
    Interrupted,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Evaluator(_) => 3,
            CliError::Morph(_) => 4,
            CliError::Interrupted => 130,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Evaluator(m) | CliError::Morph(m) => f.write_str(m),
            CliError::Interrupted => f.write_str("interrupted"),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Evaluator(_) | SearchError::MemoryBound { .. } => CliError::Evaluator(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<ArchGraph, CliError> {
    ArchGraph::from_json(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn describe(g: &ArchGraph) -> String {
    let s = g.summary();
    format!(
        "{} layers, main chain widths {:?}, {} skip-connections, ~{:.1} MiB at batch 64",
        g.layers().len(),
        s.widths,
        s.skips.len(),
        g.estimate_memory(64) as f64 / (1 << 20) as f64
    )
}

pub fn search(args: SearchArgs) -> Result<(), CliError> {
    let (mut state, dir) = match &args.resume {
        Some(dir) => {
            let mut state = SearchState::load(dir)?;
            let evals = args.evals.unwrap_or(state.config().eval_budget);
            state.set_budget(evals, args.time_budget);
            (state, dir.clone())
        }
        None => {
            let mut cfg: SearchConfig = match &args.config {
                Some(p) => serde_json::from_str(&read(p)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                None => SearchConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(n) = args.evals {
                cfg.eval_budget = n;
            }
            if let Some(t) = args.time_budget {
                cfg.time_budget_s = Some(t);
            }
            if args.no_pipeline {
                cfg.pipeline = false;
            }
            if let Some(s) = &args.strategy {
                cfg.strategy = serde_json::from_value::<Strategy>(serde_json::Value::String(s.clone()))
                    .map_err(|_| CliError::Config(format!("unknown strategy {s:?}")))?;
            }
            let dir = args
                .out
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| CliError::Config("no output directory; pass --out".into()))?;
            cfg.output_dir = Some(dir.clone());
            let state = SearchState::new(cfg)?;
            state.create_dir(&dir)?;
            (state, dir)
        }
    };

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    // A second handler cannot be installed in the same process; that only
    // happens in tests, where the default behaviour is fine.
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));

    if !args.quiet {
        println!(
            "{:>6}  {:>10}  {:>10}  {:>10}  {:>6}  {:>8}",
            "arch", "cost", "best", "alpha", "parent", "time_s"
        );
    }
    let quiet = args.quiet;
    let mut print_step = |rep: &StepReport<'_>| {
        if quiet {
            return;
        }
        let r = rep.record;
        let cost = match &r.status {
            EvalStatus::Ok => format!("{:.6}", r.cost.unwrap_or(f64::NAN)),
            EvalStatus::Oom { .. } => "oom".into(),
            EvalStatus::Failed { .. } => "failed".into(),
        };
        let best = rep
            .best
            .and_then(|b| b.cost)
            .map_or("-".into(), |c| format!("{c:.6}"));
        let alpha = r.acquisition.map_or("-".into(), |a| format!("{a:.6}"));
        let parent = r.parent_id.map_or("-".into(), |p| p.to_string());
        println!(
            "{:>6}  {:>10}  {:>10}  {:>10}  {:>6}  {:>8.2}",
            r.arch_id, cost, best, alpha, parent, r.wall_time
        );
    };

    let evaluator = state.config().build_evaluator();
    let summary = run(&mut state, evaluator, Some(&dir), &stop, &mut print_step)?;
    if let Some((id, cost)) = summary.best {
        println!("best: arch {id} with cost {cost:.6} ({} records in {})", state.history().len(), dir.display());
    }
    if summary.exhausted {
        println!("stopped early: no new architecture fits the memory bound");
    }
    if summary.interrupted {
        println!("interrupted; continue with `morphnas search --resume {}`", dir.display());
        return Err(CliError::Interrupted);
    }
    Ok(())
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn distance(a: &Path, b: &Path, lambda: f64) -> Result<(), CliError> {
    if !(lambda > 0.0) {
        return Err(CliError::Config(format!("lambda must be positive, got {lambda}")));
    }
    let (ga, gb) = (load_graph(a)?, load_graph(b)?);
    let p = distance_parts(&ga.summary(), &gb.summary(), lambda);
    println!("d   = {:.6}", p.total);
    println!("D_l = {:.6}", p.layers);
    println!("D_s = {:.6}", p.skips);
    Ok(())
}

pub fn kernel(run_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let state = SearchState::load(run_dir)?;
    let diag = kernel_diagnostic(&state);
    if diag.arch_ids.is_empty() {
        return Err(CliError::Config(format!("{}: no evaluated architectures", run_dir.display())));
    }
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    write(&out.join("K.csv"), &matrix_csv(&diag.k))?;
    write(&out.join("P.csv"), &matrix_csv(&diag.p))?;
    let ids: Vec<String> = diag.arch_ids.iter().map(u64::to_string).collect();
    println!("{} architectures (arch ids {})", ids.len(), ids.join(","));
    println!("wrote {} and {}", out.join("K.csv").display(), out.join("P.csv").display());
    println!("mse = {:.6}", diag.mse);
    Ok(())
}

pub fn morph(arch: &Path, op: &Path, out: &Path) -> Result<(), CliError> {
    let g = load_graph(arch)?;
    let text = read(op)?;
    let ops: Vec<MorphOp> = serde_json::from_str::<Vec<MorphOp>>(&text)
        .or_else(|_| serde_json::from_str::<MorphOp>(&text).map(|o| vec![o]))
        .map_err(|e| CliError::Config(format!("{}: {e}", op.display())))?;
    let child = apply_sequence(&g, &ops).map_err(|e| CliError::Morph(e.to_string()))?;
    write(out, &child.to_json())?;
    println!("{}", describe(&child));
    Ok(())
}

pub fn export(run_dir: &Path, arch_id: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let state = SearchState::load(run_dir)?;
    let rec = match arch_id {
        Some(id) => state.history().get(id as usize),
        None => state.best(),
    }
    .ok_or_else(|| match arch_id {
        Some(id) => CliError::Config(format!("no architecture {id} in {}", run_dir.display())),
        None => CliError::Config(format!("{}: no evaluated architectures", run_dir.display())),
    })?;
    let arch_id = rec.arch_id;
    let src = run_dir.join(MODELS_DIR).join(format!("arch_{arch_id}.json"));
    let g = load_graph(&src)?;
    let out = out.unwrap_or_else(|| PathBuf::from(format!("arch_{arch_id}.json")));
    write(&out, &g.to_json())?;
    let cost = rec.cost.map_or("none".into(), |c| format!("{c:.6}"));
    println!("arch {arch_id}: {}; cost {cost}", describe(&g));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn default_arch(out: &Path, shape: &[u32], classes: u32) -> Result<(), CliError> {
    let g = ArchGraph::default_cnn(TensorShape::new(shape[0], shape[1], shape[2]), classes)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write(out, &g.to_json())?;
    println!("{}", describe(&g));
    Ok(())
}
