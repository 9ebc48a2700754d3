//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances are fixed here, not tuned per run.

use std::collections::HashSet;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morphnas_core::gp::{fit, DEFAULT_NOISE as GP_NOISE};
use morphnas_core::graph::{SkipDescriptor, SkipKind, StructuralSummary};
use morphnas_core::kernel::{
    arch_distance, layers_edit_distance, layers_edit_distance_counted, skips_edit_distance,
    skips_edit_distance_counted, DistanceState, DEFAULT_LAMBDA,
};
use morphnas_core::morph::{apply_sequence, morph_weights, sample_children, DEFAULT_NOISE};
use morphnas_core::refexec::{forward, random_weights, Tensor};
use morphnas_core::search::{
    kernel_diagnostic, max_iterations, optimize_acquisition, run, SearchConfig, SearchState,
    Strategy, Surrogate, TreeParams, HISTORY_FILE,
};
use morphnas_core::{ArchGraph, TensorShape};

mod common;
use common::{brute_layers, brute_skips, naive, slope, walk};

const METRIC_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-8;
const GP_TOL: f64 = 1e-8;
const EXACT_MORPH_TOL: f64 = 1e-5;
const NOISY_MORPH_TOL: f64 = 1e-3;
const TARGET_COST: f64 = 0.15;
const SEARCH_BUDGET: u32 = 40;
const SLOPE_TOL: f64 = 0.4;

type Outcome = Result<String, String>;

fn cnn() -> ArchGraph {
    ArchGraph::default_cnn(TensorShape::new(32, 32, 3), 10).unwrap()
}

/// Morphed graphs from walks of random length off the default network.
fn graph_pool(n: usize, max_len: usize, seed: u64) -> Vec<ArchGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = cnn();
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..=max_len);
            walk(&base, len, &mut rng).0
        })
        .collect()
}

/// A search-like history: each graph is a child of an earlier one. With
/// `distinct_summaries`, graphs that differ only outside the summary (an
/// inserted ReLU, say) are skipped.
fn tree_history(n: usize, distinct_summaries: bool, rng: &mut ChaCha8Rng) -> Vec<ArchGraph> {
    let key = |g: &ArchGraph| {
        if distinct_summaries {
            let mut h = DefaultHasher::new();
            g.summary().hash(&mut h);
            h.finish()
        } else {
            g.structural_hash()
        }
    };
    let mut out = vec![cnn()];
    let mut seen = HashSet::from([key(&out[0])]);
    while out.len() < n {
        let parent = out.choose(rng).unwrap().clone();
        if let Some((_, g)) = sample_children(&parent, rng, 1, &|c| !seen.contains(&key(c))).pop() {
            seen.insert(key(&g));
            out.push(g);
        }
    }
    out
}

fn metric_axioms() -> Outcome {
    let start = Instant::now();
    let pool: Vec<StructuralSummary> = graph_pool(400, 15, 1).iter().map(ArchGraph::summary).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = |a: &StructuralSummary, b: &StructuralSummary| arch_distance(a, b, DEFAULT_LAMBDA);
    let mut worst_triangle = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let a = pool.choose(&mut rng).unwrap();
        let b = pool.choose(&mut rng).unwrap();
        let ab = d(a, b);
        if ab < 0.0 || ab != d(b, a) || d(a, a) != 0.0 || (ab == 0.0) != (a == b) {
            return Err(format!("axiom violated for {a:?} / {b:?}: d = {ab}"));
        }
    }
    for _ in 0..500 {
        let [a, b, c] = [(); 3].map(|_| pool.choose(&mut rng).unwrap());
        let excess = d(a, c) - d(a, b) - d(b, c);
        worst_triangle = worst_triangle.max(excess);
        if excess > METRIC_TOL {
            return Err(format!("triangle violated by {excess}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!("1000 pairs, 500 triples, max triangle excess {worst_triangle:.2e}, {secs:.2}s"))
}

fn matching_oracles() -> Outcome {
    let start = Instant::now();
    let pool: Vec<StructuralSummary> = graph_pool(3000, 10, 3).iter().map(ArchGraph::summary).collect();
    let short: Vec<&Vec<u32>> = pool.iter().map(|s| &s.widths).filter(|w| w.len() <= 6).collect();
    let few: Vec<&Vec<SkipDescriptor>> = pool.iter().map(|s| &s.skips).filter(|s| s.len() <= 5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut nontrivial = 0;
    for _ in 0..200 {
        let (a, b) = (short.choose(&mut rng).unwrap(), short.choose(&mut rng).unwrap());
        let (dp, bf) = (layers_edit_distance(a, b), brute_layers(a, b));
        if (dp - bf).abs() > ORACLE_TOL {
            return Err(format!("D_l {a:?} {b:?}: {dp} vs {bf}"));
        }
    }
    for _ in 0..200 {
        let (a, b) = (few.choose(&mut rng).unwrap(), few.choose(&mut rng).unwrap());
        nontrivial += usize::from(!a.is_empty() && !b.is_empty());
        let (h, bf) = (skips_edit_distance(a, b), brute_skips(a, b));
        if (h - bf).abs() > ORACLE_TOL {
            return Err(format!("D_s {a:?} {b:?}: {h} vs {bf}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!(
        "200 + 200 instances ({} trunk lists <= 6, {nontrivial} skip pairs both non-empty), {secs:.2}s",
        short.len()
    ))
}

fn kernel_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut lowest = f64::INFINITY;
    for h in 0..50 {
        let mut ds = DistanceState::new(h, DEFAULT_LAMBDA);
        for g in tree_history(30, false, &mut rng) {
            ds = ds.extend(g.summary()).map_err(|e| e.to_string())?;
        }
        let min = SymmetricEigen::new(ds.kernel_matrix()).eigenvalues.min();
        lowest = lowest.min(min);
    }
    if lowest < PSD_TOL {
        return Err(format!("minimum eigenvalue {lowest:.3e}"));
    }
    Ok(format!("50 histories of 30, minimum eigenvalue {lowest:.3e}"))
}

fn gp_correctness() -> Outcome {
    // Exact duplicate summaries with independent targets push the condition
    // number of K + noise I to ~1e5, where the explicit inverse itself loses
    // the digits being compared; the oracle problems avoid them.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let graphs = tree_history(n + 1, true, &mut rng);
        let (train, probe) = graphs.split_at(n);
        let mut ds = DistanceState::new(rng.random(), DEFAULT_LAMBDA);
        for g in train {
            ds = ds.extend(g.summary()).map_err(|e| e.to_string())?;
        }
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let k = ds.kernel_matrix();
        let model = fit(&k, &y, GP_NOISE).map_err(|e| e.to_string())?;
        for g in train.iter().chain(probe) {
            let (_, ks) = ds.candidate(&ds.distances_to(&g.summary()));
            let (mu, sigma) = model.predict(&ks, 1.0).map_err(|e| e.to_string())?;
            let (mu_o, sigma_o) = naive(&k, &y, model.diagonal_term(), &ks);
            worst = worst.max((mu - mu_o).abs()).max((sigma - sigma_o).abs());
        }
    }
    if worst > GP_TOL {
        return Err(format!("max deviation {worst:.3e}"));
    }
    Ok(format!("50 problems of size <= 12, max deviation {worst:.3e}"))
}

fn morphism_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = ArchGraph::default_cnn(TensorShape::new(8, 8, 3), 5).unwrap();
    let (mut worst_exact, mut worst_noisy): (f64, f64) = (0.0, 0.0);
    let mut done = 0;
    while done < 200 {
        let len = rng.random_range(0..8);
        let (g, _) = walk(&base, len, &mut rng);
        let Some((op, _)) = sample_children(&g, &mut rng, 1, &|_| true).pop() else {
            continue;
        };
        let w = random_weights(&g, &mut rng);
        let x = Tensor::random(g.input_shape(), &mut rng);
        let y = forward(&g, &w, &x).map_err(|e| e.to_string())?;
        for (noise, worst) in [(0.0, &mut worst_exact), (DEFAULT_NOISE, &mut worst_noisy)] {
            let (c, cw) = morph_weights(&g, &w, &op, noise, &mut rng).map_err(|e| format!("{op:?}: {e}"))?;
            let dev = forward(&c, &cw, &x).map_err(|e| e.to_string())?.max_abs_diff(&y);
            *worst = worst.max(dev);
        }
        done += 1;
    }
    if worst_exact > EXACT_MORPH_TOL || worst_noisy > NOISY_MORPH_TOL {
        return Err(format!("deviation {worst_exact:.3e} exact, {worst_noisy:.3e} noisy"));
    }
    Ok(format!("200 triples, max deviation {worst_exact:.3e} exact, {worst_noisy:.3e} with noise"))
}

fn best_cost(strategy: Strategy, seed: u64) -> Result<f64, String> {
    // The initial architecture counts toward the budget.
    let cfg = SearchConfig {
        strategy,
        seed,
        eval_budget: SEARCH_BUDGET - 1,
        ..SearchConfig::default()
    };
    let mut s = SearchState::new(cfg).map_err(|e| e.to_string())?;
    let ev = s.config().build_evaluator();
    let sum = run(&mut s, ev, None, &AtomicBool::new(false), &mut |_| {}).map_err(|e| e.to_string())?;
    if s.history().len() != SEARCH_BUDGET as usize {
        return Err(format!("{strategy:?} seed {seed}: {} records", s.history().len()));
    }
    Ok(sum.best.expect("an observed record").1)
}

fn search_effectiveness() -> Outcome {
    let start = Instant::now();
    let (mut beats_both, mut reached) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..10 {
        let bo = best_cost(Strategy::Bayesian, seed)?;
        let rnd = best_cost(Strategy::Random, seed)?;
        let bfs = best_cost(Strategy::Bfs, seed)?;
        beats_both += usize::from(bo <= rnd && bo <= bfs);
        reached += usize::from(bo <= TARGET_COST);
        rows.push(format!("{bo:.3}/{rnd:.3}/{bfs:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "beats random and BFS in {beats_both}/10, <= {TARGET_COST} in {reached}/10, {secs:.1}s; best bo/random/bfs per seed: {}",
        rows.join(" ")
    );
    if beats_both >= 8 && reached >= 7 && secs < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn acquisition_contract() -> Outcome {
    let mut checked = 0;
    let mut max_iter = 0;
    for seed in 0..4 {
        let cfg = SearchConfig {
            seed,
            eval_budget: 12,
            ..SearchConfig::default()
        };
        let mut s = SearchState::new(cfg.clone()).map_err(|e| e.to_string())?;
        let ev = s.config().build_evaluator();
        run(&mut s, ev, None, &AtomicBool::new(false), &mut |_| {}).map_err(|e| e.to_string())?;
        let observed = s.observed(s.history().len());
        let costs: Vec<f64> = observed.iter().map(|r| r.cost.unwrap()).collect();
        let surrogate = Surrogate::fit(s.distance().clone(), &costs, cfg.beta, cfg.gp_noise).map_err(|e| e.to_string())?;
        let base = s.history()[0].graph.estimate_memory(cfg.batch);
        for (t_low, r) in [(1e-3, 0.9), (1e-2, 0.5), (0.5, 0.95)] {
            for bound in [base + base / 10, 2 * base, cfg.memory_bound] {
                let params = TreeParams {
                    t_low,
                    r,
                    max_children: cfg.max_children,
                    anneal: true,
                };
                let accept = |g: &ArchGraph| g.estimate_memory(cfg.batch) <= bound;
                let go = |stream: u64| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(stream);
                    optimize_acquisition(&observed, &surrogate, &params, &accept, &mut rng)
                };
                let res = go(bound);
                let again = go(bound);
                if res.best != again.best || res.best_generated != again.best_generated {
                    return Err(format!("seed {seed}: output differs between identical calls"));
                }
                let limit = max_iterations(t_low, r);
                max_iter = max_iter.max(res.iterations);
                if res.iterations > limit {
                    return Err(format!("{} iterations, bound {limit}", res.iterations));
                }
                for p in std::iter::once(&res.best).chain(res.best_generated.as_ref()) {
                    let parent = &s.history()[p.parent_id as usize].graph;
                    let g = apply_sequence(parent, &p.ops).map_err(|e| e.to_string())?;
                    g.validate().map_err(|e| e.to_string())?;
                    if g != p.graph {
                        return Err("replay differs from the returned graph".into());
                    }
                    if !p.ops.is_empty() && g.estimate_memory(cfg.batch) > bound {
                        return Err(format!("candidate exceeds bound {bound}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} proposals replayed, deterministic, at most {max_iter} iterations"))
}

fn kernel_quality() -> Outcome {
    let cfg = SearchConfig {
        seed: 8,
        eval_budget: 39,
        ..SearchConfig::default()
    };
    let mut s = SearchState::new(cfg).map_err(|e| e.to_string())?;
    let ev = s.config().build_evaluator();
    run(&mut s, ev, None, &AtomicBool::new(false), &mut |_| {}).map_err(|e| e.to_string())?;
    let diag = kernel_diagnostic(&s);
    let n = diag.arch_ids.len();
    if s.history().len() != 40 || n == 0 {
        return Err(format!("{} records, {n} observed", s.history().len()));
    }
    for m in [&diag.k, &diag.p] {
        if m.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err("entry outside [-1, 1]".into());
        }
        if (0..n).any(|i| m[(i, i)] != 1.0) {
            return Err("diagonal entry differs from 1".into());
        }
    }
    if !diag.mse.is_finite() || diag.mse < 0.0 {
        return Err(format!("mse {}", diag.mse));
    }
    Ok(format!("{n} x {n} matrices, mse {:.4}", diag.mse))
}

fn resume_fidelity() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SearchConfig {
        seed: 9,
        eval_budget: 15,
        ..SearchConfig::default()
    };
    let run_into = |dir: &std::path::Path, stop_after: Option<u64>| -> Result<(), String> {
        let mut s = SearchState::new(cfg.clone()).map_err(|e| e.to_string())?;
        s.create_dir(dir).map_err(|e| e.to_string())?;
        let stop = AtomicBool::new(false);
        let ev = s.config().build_evaluator();
        run(&mut s, ev, Some(dir), &stop, &mut |rep| {
            if Some(rep.record.arch_id) == stop_after {
                stop.store(true, Ordering::SeqCst);
            }
        })
        .map_err(|e| e.to_string())?;
        Ok(())
    };
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    run_into(&full, None)?;
    let k = 7;
    run_into(&split, Some(k))?;
    let mut s = SearchState::load(&split).map_err(|e| e.to_string())?;
    let done = s.history().len() as u32 - 1;
    s.set_budget(cfg.eval_budget - done, None);
    let ev = s.config().build_evaluator();
    run(&mut s, ev, Some(&split), &AtomicBool::new(false), &mut |_| {}).map_err(|e| e.to_string())?;
    let a = fs::read(full.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    let b = fs::read(split.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    if a != b {
        return Err("history.jsonl differs".into());
    }
    Ok(format!("interrupted after {k} evaluations, {} byte histories identical", a.len()))
}

fn complexity_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sizes = [4usize, 8, 16, 32];
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let widths = [16u32, 32, 64, 128, 256];
    let (mut layer_ops, mut skip_ops) = (Vec::new(), Vec::new());
    for &n in &sizes {
        let (mut lo, mut so) = (0u64, 0u64);
        for _ in 0..20 {
            let mut w = || -> Vec<u32> { (0..n).map(|_| *widths.choose(&mut rng).unwrap()).collect() };
            let (a, b) = (w(), w());
            layers_edit_distance_counted(&a, &b, &mut lo);
            let mut s = || -> Vec<SkipDescriptor> {
                let mut v: Vec<SkipDescriptor> = (0..n)
                    .map(|_| SkipDescriptor {
                        start_rank: rng.random_range(0..2 * n as u32),
                        span: rng.random_range(1..2 * n as u32),
                        kind: if rng.random_bool(0.5) { SkipKind::Add } else { SkipKind::Concat },
                    })
                    .collect();
                v.sort();
                v
            };
            let (a, b) = (s(), s());
            skips_edit_distance_counted(&a, &b, &mut so);
        }
        layer_ops.push(lo as f64);
        skip_ops.push(so as f64);
    }
    let (sl, ss) = (slope(&xs, &layer_ops), slope(&xs, &skip_ops));
    let detail = format!("layer slope {sl:.3}, skip slope {ss:.3}");
    if (sl - 2.0).abs() <= SLOPE_TOL && (ss - 3.0).abs() <= SLOPE_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("metric axioms", metric_axioms),
        ("matching oracles", matching_oracles),
        ("kernel validity", kernel_validity),
        ("gp correctness", gp_correctness),
        ("morphism function preservation", morphism_preservation),
        ("search effectiveness", search_effectiveness),
        ("acquisition optimizer contract", acquisition_contract),
        ("kernel quality diagnostic", kernel_quality),
        ("resume fidelity", resume_fidelity),
        ("complexity scaling", complexity_scaling),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
