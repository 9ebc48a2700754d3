use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use super::HistoryRecord;
use crate::gp::{self, GpError, GpModel};
use crate::graph::ArchGraph;
use crate::kernel::DistanceState;
use crate::morph::{sample_children, MorphOp};

/// `mu - beta * sigma`; lower is more promising.
pub fn acquisition(mu: f64, sigma: f64, beta: f64) -> f64 {
    mu - beta * sigma
}

/// GP over the embedded history.
#[derive(Debug, Clone)]
pub struct Surrogate {
    distance: DistanceState,
    gp: GpModel,
    beta: f64,
}

impl Surrogate {
    /// `costs[i]` is the observed cost of `distance.archive()[i]`.
    pub fn fit(distance: DistanceState, costs: &[f64], beta: f64, noise: f64) -> Result<Self, GpError> {
        let gp = gp::fit(&distance.kernel_matrix(), costs, noise)?;
        Ok(Surrogate { distance, gp, beta })
    }

    pub fn distance(&self) -> &DistanceState {
        &self.distance
    }

    pub fn model(&self) -> &GpModel {
        &self.gp
    }

    /// Posterior mean and standard deviation for `g`, in cost units.
    pub fn predict(&self, g: &ArchGraph) -> (f64, f64) {
        let d = self.distance.distances_to(&g.summary());
        let (_, k) = self.distance.candidate(&d);
        self.gp
            .predict(&k, 1.0)
            .expect("kernel row matches the training set")
    }

    pub fn acquisition(&self, g: &ArchGraph) -> f64 {
        let (mu, sigma) = self.predict(g);
        acquisition(mu, sigma, self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub t_low: f64,
    pub r: f64,
    pub max_children: usize,
    /// Without annealing every generated child joins the queue.
    pub anneal: bool,
}

/// Upper bound on expansions: the temperature starts at 1 and is multiplied
/// by `r` until it reaches `t_low`.
pub fn max_iterations(t_low: f64, r: f64) -> usize {
    if t_low >= 1.0 {
        return 0;
    }
    (t_low.ln() / r.ln()).ceil() as usize
}

/// A candidate and how to reach it from an observed architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub parent_id: u64,
    pub ops: Vec<MorphOp>,
    pub graph: ArchGraph,
    /// Acquisition value, or the observed cost for an unexpanded record.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct AcquisitionResult {
    /// Minimizer over everything seen; `ops` is empty when no generated
    /// child beat the best observed cost.
    pub best: Proposal,
    /// Best strictly generated child, accepted or not.
    pub best_generated: Option<Proposal>,
    pub iterations: usize,
    pub generated: usize,
}

struct TreeNode {
    parent: Option<usize>,
    arch_id: u64,
    op: Option<MorphOp>,
    graph: ArchGraph,
    score: f64,
}

#[derive(PartialEq)]
struct Entry {
    score: f64,
    seq: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Reversed so the max-heap pops the lowest score, earliest insertion first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Annealed tree search for the acquisition minimizer.
///
/// The queue starts with every observed architecture keyed by its cost. Each
/// iteration expands the lowest entry into up to `max_children` children
/// passing `accept`; a child with value `a` is queued when
/// `exp((c_min - a) / T) > u`, `u ~ U(0, 1)`, and `T` shrinks by `r` per
/// iteration until it falls to `t_low`.
///
/// `observed` must hold only records with a cost, in arch-id order.
pub fn optimize_acquisition<R: Rng + ?Sized>(
    observed: &[&HistoryRecord],
    surrogate: &Surrogate,
    params: &TreeParams,
    accept: &dyn Fn(&ArchGraph) -> bool,
    rng: &mut R,
) -> AcquisitionResult {
    assert!(!observed.is_empty(), "the tree search needs an observed architecture");
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut queue = BinaryHeap::new();
    for rec in observed {
        let score = rec.ok_cost().expect("observed records carry a cost");
        queue.push(Entry {
            score,
            seq: nodes.len(),
        });
        nodes.push(TreeNode {
            parent: None,
            arch_id: rec.arch_id,
            op: None,
            graph: rec.graph.clone(),
            score,
        });
    }
    let mut f_min = (0..nodes.len())
        .min_by(|&a, &b| nodes[a].score.total_cmp(&nodes[b].score))
        .expect("non-empty");
    let mut c_min = nodes[f_min].score;
    let mut best_generated: Option<usize> = None;

    let mut t = 1.0;
    let mut iterations = 0;
    let mut generated = 0;
    while t > params.t_low {
        let Some(Entry { seq: at, .. }) = queue.pop() else {
            break;
        };
        iterations += 1;
        let children = sample_children(&nodes[at].graph, rng, params.max_children, accept);
        for (op, graph) in children {
            generated += 1;
            let a = surrogate.acquisition(&graph);
            let idx = nodes.len();
            nodes.push(TreeNode {
                parent: Some(at),
                arch_id: nodes[at].arch_id,
                op: Some(op),
                graph,
                score: a,
            });
            if best_generated.is_none_or(|b| a < nodes[b].score) {
                best_generated = Some(idx);
            }
            let keep = !params.anneal || ((c_min - a) / t).exp() > rng.random::<f64>();
            if keep {
                queue.push(Entry { score: a, seq: idx });
                if a < c_min {
                    c_min = a;
                    f_min = idx;
                }
            }
        }
        t *= params.r;
    }

    let proposal = |i: usize| {
        let mut ops = Vec::new();
        let mut at = i;
        while let Some(p) = nodes[at].parent {
            ops.push(nodes[at].op.expect("child nodes carry an op"));
            at = p;
        }
        ops.reverse();
        Proposal {
            parent_id: nodes[i].arch_id,
            ops,
            graph: nodes[i].graph.clone(),
            score: nodes[i].score,
        }
    };
    AcquisitionResult {
        best: proposal(f_min),
        best_generated: best_generated.map(proposal),
        iterations,
        generated,
    }
}
