//! Oracles shared by the integration tests.
#![allow(dead_code)]

use morphnas_core::graph::SkipDescriptor;
use morphnas_core::kernel::{layer_distance, skip_distance};
use morphnas_core::morph::{sample_children, MorphOp};
use morphnas_core::ArchGraph;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Exhaustive minimum over order-preserving partial matchings: at each step
/// either drop the head of `a`, drop the head of `b`, or match the two heads.
pub fn brute_layers(a: &[u32], b: &[u32]) -> f64 {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len() as f64,
        (_, None) => a.len() as f64,
        (Some((&x, ra)), Some((&y, rb))) => {
            let matched = layer_distance(x, y) + brute_layers(ra, rb);
            let drop_a = 1.0 + brute_layers(ra, b);
            let drop_b = 1.0 + brute_layers(a, rb);
            matched.min(drop_a).min(drop_b)
        }
    }
}

/// Exhaustive minimum over partial injections from `a` into `b`.
pub fn brute_skips(a: &[SkipDescriptor], b: &[SkipDescriptor]) -> f64 {
    fn go(a: &[SkipDescriptor], b: &[SkipDescriptor], used: &mut Vec<bool>) -> f64 {
        let Some((x, rest)) = a.split_first() else {
            return used.iter().filter(|u| !**u).count() as f64;
        };
        let mut best = 1.0 + go(rest, b, used);
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(skip_distance(x, &b[j]) + go(rest, b, used));
                used[j] = false;
            }
        }
        best
    }
    go(a, b, &mut vec![false; b.len()])
}

/// Textbook posterior through an explicit inverse.
pub fn naive(k: &DMatrix<f64>, y: &[f64], diag: f64, k_star: &DVector<f64>) -> (f64, f64) {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / std));
    let inv = (k + DMatrix::identity(n, n) * diag).try_inverse().unwrap();
    let mu = (k_star.transpose() * &inv * ys)[0];
    let s2 = 1.0 - (k_star.transpose() * &inv * k_star)[0];
    (mu * std + mean, s2.max(0.0).sqrt() * std)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// A random walk of up to `len` sampled morphisms from `g`.
pub fn walk<R: Rng>(g: &ArchGraph, len: usize, rng: &mut R) -> (ArchGraph, Vec<MorphOp>) {
    let mut cur = g.clone();
    let mut ops = Vec::new();
    for _ in 0..len {
        let Some((op, child)) = sample_children(&cur, rng, 1, &|_| true).pop() else {
            break;
        };
        ops.push(op);
        cur = child;
    }
    (cur, ops)
}
