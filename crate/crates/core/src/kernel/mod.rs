//! Edit distance between architectures and the kernel built on it.
//!
//! The distance compares structural summaries: main-chain widths are
//! matched in order by dynamic programming, skip descriptors are matched
//! by minimum-cost assignment, and unmatched elements cost 1 each.
//! The distance is embedded into Euclidean space ([`embed`]) and the kernel
//! is `exp(-rho^2)` of the embedded distance.

mod assign;
pub mod embed;
mod state;

pub use assign::min_cost_assignment;
pub use embed::{bourgain_embed, check_metric, euclidean, Embedding};
pub use state::DistanceState;

use thiserror::Error;

use crate::graph::{SkipDescriptor, StructuralSummary};

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("distance matrix is not a metric: {0}")]
    NotMetric(String),
    #[error("malformed kernel state: {0}")]
    State(String),
}

/// `|wa - wb| / max(wa, wb)`.
pub fn layer_distance(wa: u32, wb: u32) -> f64 {
    let m = wa.max(wb);
    if m == 0 {
        return 0.0;
    }
    f64::from(wa.abs_diff(wb)) / f64::from(m)
}

/// Normalized difference of start ranks and spans; the join kind is not compared.
pub fn skip_distance(a: &SkipDescriptor, b: &SkipDescriptor) -> f64 {
    let num = a.start_rank.abs_diff(b.start_rank) + a.span.abs_diff(b.span);
    let den = a.start_rank.max(b.start_rank) + a.span.max(b.span);
    if den == 0 {
        return 0.0;
    }
    f64::from(num) / f64::from(den)
}

/// Order-preserving matching of two width sequences, unmatched layers
/// costing 1. Operation count (DP cells) is added to `ops`.
pub fn layers_edit_distance_counted(a: &[u32], b: &[u32], ops: &mut u64) -> f64 {
    // Fixed argument order keeps the result bit-identical under swapping.
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let m = b.len();
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64).collect();
    let mut cur = vec![0.0; m + 1];
    for (i, &wa) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64;
        for (j, &wb) in b.iter().enumerate() {
            *ops += 1;
            let del = prev[j + 1] + 1.0;
            let ins = cur[j] + 1.0;
            let sub = prev[j] + layer_distance(wa, wb);
            cur[j + 1] = del.min(ins).min(sub);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

pub fn layers_edit_distance(a: &[u32], b: &[u32]) -> f64 {
    layers_edit_distance_counted(a, b, &mut 0)
}

/// Minimum-cost partial matching of two skip sets, unmatched skips costing 1.
pub fn skips_edit_distance_counted(a: &[SkipDescriptor], b: &[SkipDescriptor], ops: &mut u64) -> f64 {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (a.get(i), b.get(j)) {
                    (Some(x), Some(y)) => skip_distance(x, y),
                    _ => 1.0,
                })
                .collect()
        })
        .collect();
    min_cost_assignment(&cost, ops).0
}

pub fn skips_edit_distance(a: &[SkipDescriptor], b: &[SkipDescriptor]) -> f64 {
    skips_edit_distance_counted(a, b, &mut 0)
}

/// The two terms of the architecture distance and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceParts {
    pub layers: f64,
    pub skips: f64,
    pub total: f64,
}

pub fn distance_parts(a: &StructuralSummary, b: &StructuralSummary, lambda: f64) -> DistanceParts {
    let layers = layers_edit_distance(&a.widths, &b.widths);
    let skips = skips_edit_distance(&a.skips, &b.skips);
    DistanceParts {
        layers,
        skips,
        total: layers + lambda * skips,
    }
}

/// `D_l + lambda * D_s` over structural summaries.
pub fn arch_distance(a: &StructuralSummary, b: &StructuralSummary, lambda: f64) -> f64 {
    distance_parts(a, b, lambda).total
}

/// `exp(-rho^2)`.
pub fn kernel_value(rho: f64) -> f64 {
    (-rho * rho).exp()
}
