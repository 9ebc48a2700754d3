//! Graph-level network morphism.
//!
//! Four edits grow an architecture without changing what it computes once
//! the new weights are initialized (see [`weights`]): `deep` inserts a layer
//! after a trunk node, `wide` widens a node together with everything sharing
//! its channel dimension, and `add`/`concat` attach a skip-connection between
//! two trunk nodes. Every operation returns a fresh, validated graph.

pub mod weights;

pub use weights::{morph_weights, DEFAULT_NOISE};

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArchGraph, LayerId, LayerKind, NodeId, Trunk, Violation};
use crate::refexec::ExecError;

/// Widths produced by the sampler never exceed this.
pub const MAX_SAMPLED_WIDTH: u32 = 512;
/// Children drawn per expansion.
pub const DEFAULT_MAX_CHILDREN: usize = 8;
const DROPOUT_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertKind {
    Conv,
    Dense,
    Relu,
    BatchNorm,
    Dropout,
}

impl InsertKind {
    pub const ALL: [InsertKind; 5] = [
        InsertKind::Conv,
        InsertKind::Dense,
        InsertKind::Relu,
        InsertKind::BatchNorm,
        InsertKind::Dropout,
    ];

    fn layer_kind(self, channels: u32) -> LayerKind {
        match self {
            InsertKind::Conv => LayerKind::Conv {
                kernel_size: 3,
                stride: 1,
                filters: channels,
            },
            InsertKind::Dense => LayerKind::Dense { units: channels },
            InsertKind::Relu => LayerKind::ReLU,
            InsertKind::BatchNorm => LayerKind::BatchNorm,
            InsertKind::Dropout => LayerKind::Dropout { rate: DROPOUT_RATE },
        }
    }
}

/// One morphism edit. Node ids refer to the graph the op is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", content = "params", rename_all = "snake_case")]
pub enum MorphOp {
    Deep {
        at_node: NodeId,
        inserted_kind: InsertKind,
    },
    Wide {
        at_node: NodeId,
        new_width: u32,
    },
    #[serde(rename = "add")]
    AddSkip { from_node: NodeId, to_node: NodeId },
    #[serde(rename = "concat")]
    ConcatSkip { from_node: NodeId, to_node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MorphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not on the trunk")]
    OffTrunk(NodeId),
    #[error("node {0}: cannot insert right after a skip-connection")]
    AfterSkip(NodeId),
    #[error("node {node}: {reason}")]
    Forbidden { node: NodeId, reason: &'static str },
    #[error("node {node}: new width {requested} must exceed current width {current}")]
    NotWider {
        node: NodeId,
        current: u32,
        requested: u32,
    },
    #[error("node {node}: widening would change the classifier output")]
    WidensClassifier { node: NodeId },
    #[error("node {node}: effective area reaches the network input")]
    WidensInput { node: NodeId },
    #[error("node {node}: effective area has no conv/dense producer")]
    NoProducer { node: NodeId },
    #[error("node {node}: effective area contains a concat output")]
    WidensConcat { node: NodeId },
    #[error("skip endpoints must differ (node {0})")]
    SameEndpoints(NodeId),
    #[error("skip from node {from} (rank {from_rank}) must start before node {to} (rank {to_rank})")]
    Reversed {
        from: NodeId,
        to: NodeId,
        from_rank: u32,
        to_rank: u32,
    },
    #[error("node {0} is not a legal skip endpoint")]
    BadEndpoint(NodeId),
    #[error("morphed graph is invalid: {0}")]
    Invalid(#[from] Violation),
    #[error(transparent)]
    Weights(#[from] ExecError),
    #[error("operation {index} failed: {source}")]
    Sequence {
        index: usize,
        source: Box<MorphError>,
    },
}

/// Nodes sharing a channel dimension with a widened node, plus the
/// Conv/Dense layers writing into (`prev_layers`) and reading from
/// (`next_layers`) that set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EffectiveArea {
    pub nodes: BTreeSet<NodeId>,
    pub prev_layers: BTreeSet<LayerId>,
    pub next_layers: BTreeSet<LayerId>,
}

/// Closure of `u0` under channel-preserving layers, in both directions.
/// Concat changes the channel count, so it bounds the area like Conv/Dense.
pub fn effective_area(g: &ArchGraph, u0: NodeId) -> Result<EffectiveArea, MorphError> {
    if g.shape(u0).is_none() {
        return Err(MorphError::UnknownNode(u0));
    }
    let mut adjacent: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for l in g.layers().values() {
        if !l.kind.preserves_channels() {
            continue;
        }
        for &i in &l.inputs {
            adjacent.entry(i).or_default().push(l.output);
            adjacent.entry(l.output).or_default().push(i);
        }
    }
    let mut nodes = BTreeSet::from([u0]);
    let mut queue = VecDeque::from([u0]);
    while let Some(n) = queue.pop_front() {
        for &m in adjacent.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            if nodes.insert(m) {
                queue.push_back(m);
            }
        }
    }
    let mut area = EffectiveArea {
        nodes,
        ..Default::default()
    };
    for l in g.layers().values().filter(|l| l.kind.is_weighted()) {
        if area.nodes.contains(&l.output) {
            area.prev_layers.insert(l.id);
        }
        if l.inputs.iter().any(|i| area.nodes.contains(i)) {
            area.next_layers.insert(l.id);
        }
    }
    Ok(area)
}

/// Precomputed trunk facts used to decide which edits are legal.
struct Legality<'g> {
    g: &'g ArchGraph,
    trunk: Trunk,
    nonneg: HashSet<NodeId>,
    classifier_out: Option<NodeId>,
}

impl<'g> Legality<'g> {
    fn new(g: &'g ArchGraph) -> Self {
        let trunk = g.trunk();
        let mut nonneg = HashSet::new();
        if let Ok(order) = g.topo_order() {
            for id in order {
                let l = &g.layers()[&id];
                let all_nonneg = || l.inputs.iter().all(|i| nonneg.contains(i));
                let yes = match l.kind {
                    LayerKind::ReLU | LayerKind::Softmax => true,
                    LayerKind::Pool { .. }
                    | LayerKind::GlobalAvgPool
                    | LayerKind::Dropout { .. }
                    | LayerKind::Add
                    | LayerKind::Concat => all_nonneg(),
                    _ => false,
                };
                if yes {
                    nonneg.insert(l.output);
                }
            }
        }
        let classifier_out = trunk.main_chain.last().map(|id| g.layers()[id].output);
        Legality {
            g,
            trunk,
            nonneg,
            classifier_out,
        }
    }

    fn main_chain_len(&self) -> u32 {
        self.trunk.main_chain.len() as u32
    }

    fn on_trunk(&self, node: NodeId) -> Result<usize, MorphError> {
        if self.g.shape(node).is_none() {
            return Err(MorphError::UnknownNode(node));
        }
        self.trunk.position(node).ok_or(MorphError::OffTrunk(node))
    }

    /// No Dense or global pooling at or before trunk position `pos`.
    fn spatial_at(&self, pos: usize) -> bool {
        self.trunk.layers[..pos].iter().all(|id| {
            !matches!(
                self.g.layers()[id].kind,
                LayerKind::Dense { .. } | LayerKind::GlobalAvgPool
            )
        })
    }

    /// Flat node with no spatial layer after it on the trunk.
    fn flat_at(&self, pos: usize) -> bool {
        let node = self.trunk.nodes[pos];
        self.g.shape(node).is_some_and(|s| s.is_flat())
            && self.trunk.layers[pos..].iter().all(|id| {
                !matches!(
                    self.g.layers()[id].kind,
                    LayerKind::Conv { .. } | LayerKind::Pool { .. } | LayerKind::GlobalAvgPool
                )
            })
    }

    fn check_deep(&self, node: NodeId, kind: InsertKind) -> Result<(), MorphError> {
        let pos = self.on_trunk(node)?;
        if node == self.g.output_node() || Some(node) == self.classifier_out {
            return Err(MorphError::Forbidden {
                node,
                reason: "cannot insert after the classifier",
            });
        }
        if self.g.is_skip_output(node) {
            return Err(MorphError::AfterSkip(node));
        }
        match kind {
            InsertKind::Conv if !self.spatial_at(pos) => Err(MorphError::Forbidden {
                node,
                reason: "conv insertion outside the spatial segment",
            }),
            InsertKind::Dense if !self.flat_at(pos) => Err(MorphError::Forbidden {
                node,
                reason: "dense insertion outside the dense segment",
            }),
            InsertKind::Relu if !self.nonneg.contains(&node) => Err(MorphError::Forbidden {
                node,
                reason: "relu insertion on a possibly negative tensor",
            }),
            _ => Ok(()),
        }
    }

    fn deep_locations(&self, kind: InsertKind) -> Vec<NodeId> {
        self.trunk
            .nodes
            .iter()
            .copied()
            .filter(|&n| self.check_deep(n, kind).is_ok())
            .collect()
    }

    /// Trunk node that can anchor a skip-connection; returns its rank.
    fn endpoint_rank(&self, node: NodeId) -> Result<u32, MorphError> {
        let pos = self.on_trunk(node)?;
        let rank = self.trunk.ranks[pos];
        if node == self.g.input_node() || self.g.is_skip_output(node) || rank >= self.main_chain_len()
        {
            return Err(MorphError::BadEndpoint(node));
        }
        Ok(rank)
    }

    fn check_skip(&self, from: NodeId, to: NodeId) -> Result<(), MorphError> {
        if from == to {
            return Err(MorphError::SameEndpoints(from));
        }
        let from_rank = self.endpoint_rank(from)?;
        let to_rank = self.endpoint_rank(to)?;
        if from_rank >= to_rank {
            return Err(MorphError::Reversed {
                from,
                to,
                from_rank,
                to_rank,
            });
        }
        Ok(())
    }

    /// Legal (start, end) pairs not already joined by a skip-connection.
    fn skip_pairs(&self) -> Vec<(NodeId, NodeId)> {
        let existing: HashSet<(NodeId, NodeId)> = self
            .g
            .skip_connections()
            .iter()
            .map(|c| (c.start, c.end))
            .collect();
        let ends: Vec<(NodeId, u32)> = self
            .trunk
            .nodes
            .iter()
            .filter_map(|&n| self.endpoint_rank(n).ok().map(|r| (n, r)))
            .collect();
        let mut pairs = Vec::new();
        for &(u, ru) in &ends {
            for &(v, rv) in &ends {
                if ru < rv && !existing.contains(&(u, v)) {
                    pairs.push((u, v));
                }
            }
        }
        pairs
    }

    /// Outputs of main-chain layers other than the classifier, with widths.
    fn widenable(&self) -> Vec<(NodeId, u32)> {
        let n = self.trunk.main_chain.len();
        self.trunk.main_chain[..n.saturating_sub(1)]
            .iter()
            .map(|id| {
                let l = &self.g.layers()[id];
                (l.output, l.width)
            })
            .collect()
    }
}

/// Inserts an identity-shaped layer between `node` and its trunk successor.
pub fn deep(g: &ArchGraph, node: NodeId, kind: InsertKind) -> Result<ArchGraph, MorphError> {
    let legal = Legality::new(g);
    legal.check_deep(node, kind)?;
    let consumer = legal.trunk.consumer(node).ok_or(MorphError::Forbidden {
        node,
        reason: "node has no trunk successor",
    })?;
    let channels = g.shape(node).expect("checked").channels;
    let mut out = g.clone();
    let (_, new_node) = out.insert_layer(kind.layer_kind(channels), vec![node]);
    out.layers_mut().get_mut(&consumer).expect("trunk layer").inputs[0] = new_node;
    out.reinfer_shapes()?;
    Ok(out)
}

/// Widens `node` to `new_width` channels along with its effective area.
pub fn wide(g: &ArchGraph, node: NodeId, new_width: u32) -> Result<ArchGraph, MorphError> {
    let current = g.shape(node).ok_or(MorphError::UnknownNode(node))?.channels;
    if new_width <= current {
        return Err(MorphError::NotWider {
            node,
            current,
            requested: new_width,
        });
    }
    let area = effective_area(g, node)?;
    if area.nodes.contains(&g.input_node()) {
        return Err(MorphError::WidensInput { node });
    }
    if area.prev_layers.is_empty() {
        return Err(MorphError::NoProducer { node });
    }
    let trunk = g.trunk();
    if trunk
        .main_chain
        .last()
        .is_some_and(|c| area.prev_layers.contains(c))
    {
        return Err(MorphError::WidensClassifier { node });
    }
    let producers = g.producers();
    for n in &area.nodes {
        if g.layers()[&producers[n]].kind == LayerKind::Concat {
            return Err(MorphError::WidensConcat { node });
        }
    }
    let mut out = g.clone();
    for id in &area.prev_layers {
        let l = out.layers_mut().get_mut(id).expect("area layer");
        l.kind = match l.kind {
            LayerKind::Conv {
                kernel_size,
                stride,
                ..
            } => LayerKind::Conv {
                kernel_size,
                stride,
                filters: new_width,
            },
            LayerKind::Dense { .. } => LayerKind::Dense { units: new_width },
            other => other,
        };
    }
    out.reinfer_shapes()?;
    Ok(out)
}

/// Additive skip from `from` into `to`: replicated pooling, a 1x1 conv (or
/// dense) matching `to`'s width, then `Add(to, branch)`.
pub fn add_skip(g: &ArchGraph, from: NodeId, to: NodeId) -> Result<ArchGraph, MorphError> {
    skip(g, from, to, LayerKind::Add)
}

/// Concatenative skip: replicated pooling, `Concat(to, branch)`, then a 1x1
/// conv (or dense) restoring `to`'s width.
pub fn concat_skip(g: &ArchGraph, from: NodeId, to: NodeId) -> Result<ArchGraph, MorphError> {
    skip(g, from, to, LayerKind::Concat)
}

fn skip(g: &ArchGraph, from: NodeId, to: NodeId, join: LayerKind) -> Result<ArchGraph, MorphError> {
    let legal = Legality::new(g);
    legal.check_skip(from, to)?;
    let trunk = &legal.trunk;
    let to_pos = trunk.position(to).expect("checked");
    let consumer = trunk.consumer(to).ok_or(MorphError::BadEndpoint(to))?;
    let pools: Vec<LayerKind> = trunk
        .layers_between(from, to)
        .iter()
        .map(|id| g.layers()[id].kind)
        .filter(LayerKind::is_pooling)
        .collect();
    let width = g.shape(to).expect("checked").channels;
    let matcher = if legal.spatial_at(to_pos) {
        LayerKind::Conv {
            kernel_size: 1,
            stride: 1,
            filters: width,
        }
    } else {
        LayerKind::Dense { units: width }
    };

    let mut out = g.clone();
    let mut branch = from;
    for kind in pools {
        branch = out.insert_layer(kind, vec![branch]).1;
    }
    let joined = match join {
        LayerKind::Add => {
            let matched = out.insert_layer(matcher, vec![branch]).1;
            out.insert_layer(LayerKind::Add, vec![to, matched]).1
        }
        _ => {
            let cat = out.insert_layer(LayerKind::Concat, vec![to, branch]).1;
            out.insert_layer(matcher, vec![cat]).1
        }
    };
    out.layers_mut().get_mut(&consumer).expect("trunk layer").inputs[0] = joined;
    out.reinfer_shapes()?;
    Ok(out)
}

pub fn apply(g: &ArchGraph, op: &MorphOp) -> Result<ArchGraph, MorphError> {
    match *op {
        MorphOp::Deep {
            at_node,
            inserted_kind,
        } => deep(g, at_node, inserted_kind),
        MorphOp::Wide { at_node, new_width } => wide(g, at_node, new_width),
        MorphOp::AddSkip { from_node, to_node } => add_skip(g, from_node, to_node),
        MorphOp::ConcatSkip { from_node, to_node } => concat_skip(g, from_node, to_node),
    }
}

/// Left fold of [`apply`] over `ops`.
pub fn apply_sequence(g: &ArchGraph, ops: &[MorphOp]) -> Result<ArchGraph, MorphError> {
    let mut cur = g.clone();
    for (index, op) in ops.iter().enumerate() {
        cur = apply(&cur, op).map_err(|e| MorphError::Sequence {
            index,
            source: Box::new(e),
        })?;
    }
    Ok(cur)
}

/// Every legal operation with the sampler's parameter choices. Small graphs
/// only; the search itself samples.
pub fn legal_ops(g: &ArchGraph) -> Vec<MorphOp> {
    let legal = Legality::new(g);
    let mut ops = Vec::new();
    for kind in InsertKind::ALL {
        for at_node in legal.deep_locations(kind) {
            ops.push(MorphOp::Deep {
                at_node,
                inserted_kind: kind,
            });
        }
    }
    for (at_node, w) in legal.widenable() {
        if w < MAX_SAMPLED_WIDTH {
            ops.push(MorphOp::Wide {
                at_node,
                new_width: (2 * w).min(MAX_SAMPLED_WIDTH),
            });
        }
    }
    for (from_node, to_node) in legal.skip_pairs() {
        ops.push(MorphOp::AddSkip { from_node, to_node });
        ops.push(MorphOp::ConcatSkip { from_node, to_node });
    }
    ops
}

/// Draws up to `max_children` distinct children of `g`.
///
/// The operation type is uniform over deep/wide/skip; parameters are then
/// uniform over the legal choices for that type. Children rejected by
/// `accept` (the memory bound, typically), duplicates, and children
/// identical to `g` are discarded and redrawn.
pub fn sample_children<R: Rng + ?Sized>(
    g: &ArchGraph,
    rng: &mut R,
    max_children: usize,
    accept: &dyn Fn(&ArchGraph) -> bool,
) -> Vec<(MorphOp, ArchGraph)> {
    let legal = Legality::new(g);
    let deep_locs: Vec<(InsertKind, Vec<NodeId>)> = InsertKind::ALL
        .iter()
        .map(|&k| (k, legal.deep_locations(k)))
        .collect();
    let widenable: Vec<(NodeId, u32)> = legal
        .widenable()
        .into_iter()
        .filter(|&(_, w)| w < MAX_SAMPLED_WIDTH)
        .collect();
    let pairs = legal.skip_pairs();
    let any_deep = deep_locs.iter().any(|(_, l)| !l.is_empty());
    if !any_deep && widenable.is_empty() && pairs.is_empty() {
        return Vec::new();
    }

    let parent = g.structural_hash();
    let mut seen = HashSet::from([parent]);
    let mut children = Vec::new();
    let max_attempts = 16 * max_children.max(1);
    for _ in 0..max_attempts {
        if children.len() >= max_children {
            break;
        }
        let op = match rng.random_range(0..3) {
            0 => {
                let (kind, locs) = &deep_locs[rng.random_range(0..deep_locs.len())];
                let Some(&at_node) = locs.choose(rng) else {
                    continue;
                };
                MorphOp::Deep {
                    at_node,
                    inserted_kind: *kind,
                }
            }
            1 => {
                let Some(&(at_node, w)) = widenable.choose(rng) else {
                    continue;
                };
                MorphOp::Wide {
                    at_node,
                    new_width: (2 * w).min(MAX_SAMPLED_WIDTH),
                }
            }
            _ => {
                let concat = rng.random_bool(0.5);
                let Some(&(from_node, to_node)) = pairs.choose(rng) else {
                    continue;
                };
                if concat {
                    MorphOp::ConcatSkip { from_node, to_node }
                } else {
                    MorphOp::AddSkip { from_node, to_node }
                }
            }
        };
        let Ok(child) = apply(g, &op) else {
            continue;
        };
        if !accept(&child) || !seen.insert(child.structural_hash()) {
            continue;
        }
        children.push((op, child));
    }
    children
}
