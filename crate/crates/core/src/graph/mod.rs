//! Architecture graphs: tensor nodes joined by layer edges.
//!
//! A graph is a DAG whose nodes carry [`TensorShape`]s and whose edges are
//! [`Layer`]s. Every layer produces exactly one node. The *trunk* is the
//! path obtained by walking back from the output node through each
//! producer's first input; join layers (`Add`, `Concat`) always list their
//! trunk operand first. Conv/Dense layers on the trunk form the main chain.

mod json;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::JsonError;

use crate::hash::stable_hash;

pub type NodeId = u32;
pub type LayerId = u32;

/// Bytes per tensor element used by [`ArchGraph::estimate_memory`].
pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl TensorShape {
    pub const fn new(height: u32, width: u32, channels: u32) -> Self {
        TensorShape {
            height,
            width,
            channels,
        }
    }

    /// A flat vector, stored as 1x1xC.
    pub const fn flat(channels: u32) -> Self {
        TensorShape::new(1, 1, channels)
    }

    pub fn elements(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width) * u64::from(self.channels)
    }

    pub fn is_flat(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    pub fn with_channels(self, channels: u32) -> Self {
        TensorShape { channels, ..self }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Input,
    Conv {
        kernel_size: u32,
        stride: u32,
        filters: u32,
    },
    Dense {
        units: u32,
    },
    ReLU,
    BatchNorm,
    Pool {
        window: u32,
        stride: u32,
    },
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
    Softmax,
    Add,
    Concat,
}

impl Hash for LayerKind {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match *self {
            LayerKind::Conv {
                kernel_size,
                stride,
                filters,
            } => {
                kernel_size.hash(state);
                stride.hash(state);
                filters.hash(state);
            }
            LayerKind::Dense { units } => units.hash(state),
            LayerKind::Pool { window, stride } => {
                window.hash(state);
                stride.hash(state);
            }
            LayerKind::Dropout { rate } => rate.to_bits().hash(state),
            _ => {}
        }
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ReLU => "relu",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Pool { .. } => "pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add | LayerKind::Concat => 2,
            _ => 1,
        }
    }

    /// Conv and Dense: the layers that own a width and a weight tensor.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    pub fn is_join(&self) -> bool {
        matches!(self, LayerKind::Add | LayerKind::Concat)
    }

    pub fn is_pooling(&self) -> bool {
        matches!(self, LayerKind::Pool { .. } | LayerKind::GlobalAvgPool)
    }

    /// Output channels equal input channels.
    pub fn preserves_channels(&self) -> bool {
        !(self.is_weighted() || matches!(self, LayerKind::Concat | LayerKind::Input))
    }

    fn check_params(&self, layer: LayerId) -> Result<(), Violation> {
        let bad = |reason: &str| {
            Err(Violation::BadParam {
                layer,
                reason: reason.to_string(),
            })
        };
        match *self {
            LayerKind::Conv {
                kernel_size,
                stride,
                filters,
            } => {
                if filters == 0 {
                    return bad("conv filters must be >= 1");
                }
                if kernel_size == 0 || kernel_size % 2 == 0 {
                    return bad("conv kernel size must be odd");
                }
                if stride != 1 {
                    return bad("conv stride must be 1");
                }
                Ok(())
            }
            LayerKind::Dense { units: 0 } => bad("dense units must be >= 1"),
            LayerKind::Pool { window, stride } if window == 0 || stride == 0 => {
                bad("pool window and stride must be >= 1")
            }
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad("dropout rate must lie in [0, 1)")
            }
            _ => Ok(()),
        }
    }

    /// Deterministic output shape for the given input shapes.
    pub fn infer_shape(
        &self,
        layer: LayerId,
        inputs: &[TensorShape],
    ) -> Result<TensorShape, Violation> {
        if inputs.len() != self.arity() {
            return Err(Violation::Arity {
                layer,
                kind: self.name(),
                expected: self.arity(),
                got: inputs.len(),
            });
        }
        let bad = |reason: String| Err(Violation::BadShape { layer, reason });
        match *self {
            LayerKind::Input => bad("input layers have no inferred shape".into()),
            LayerKind::Conv { filters, .. } => Ok(inputs[0].with_channels(filters)),
            LayerKind::Dense { units } => {
                if !inputs[0].is_flat() {
                    return bad(format!("dense layer on spatial input {}", inputs[0]));
                }
                Ok(TensorShape::flat(units))
            }
            LayerKind::Pool { window, stride } => {
                let s = inputs[0];
                if s.height < window || s.width < window {
                    return bad(format!("input {s} too small for pool window {window}"));
                }
                Ok(TensorShape::new(
                    (s.height - window) / stride + 1,
                    (s.width - window) / stride + 1,
                    s.channels,
                ))
            }
            LayerKind::GlobalAvgPool => Ok(TensorShape::flat(inputs[0].channels)),
            LayerKind::ReLU | LayerKind::BatchNorm | LayerKind::Dropout { .. } | LayerKind::Softmax => {
                Ok(inputs[0])
            }
            LayerKind::Add => {
                if inputs[0] != inputs[1] {
                    return Err(Violation::AddShapeMismatch {
                        layer,
                        a: inputs[0],
                        b: inputs[1],
                    });
                }
                Ok(inputs[0])
            }
            LayerKind::Concat => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.height != b.height || a.width != b.width {
                    return Err(Violation::ConcatShapeMismatch { layer, a, b });
                }
                Ok(a.with_channels(a.channels + b.channels))
            }
        }
    }

    /// Learnable and running-statistics parameters owned by the layer.
    pub fn parameter_count(&self, input: Option<TensorShape>, output: TensorShape) -> u64 {
        let cin = input.map_or(0, |s| u64::from(s.channels));
        let cout = u64::from(output.channels);
        match *self {
            LayerKind::Conv { kernel_size, .. } => {
                let k = u64::from(kernel_size);
                k * k * cin * cout + cout
            }
            LayerKind::Dense { .. } => cin * cout + cout,
            LayerKind::BatchNorm => 4 * cout,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Hash)]
pub struct Layer {
    pub id: LayerId,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
    /// Output channel count: filters for Conv, units for Dense, inherited otherwise.
    pub width: u32,
}

/// Summary of one skip-connection relative to the main chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipDescriptor {
    /// Number of main-chain layers before the connection starts.
    pub start_rank: u32,
    /// Number of main-chain layers the connection jumps over.
    pub span: u32,
    pub kind: SkipKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    Add,
    Concat,
}

/// Main-chain widths plus skip descriptors: all the edit distance looks at.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuralSummary {
    pub widths: Vec<u32>,
    pub skips: Vec<SkipDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("node {node}: degenerate shape {shape}")]
    DegenerateShape { node: NodeId, shape: TensorShape },
    #[error("layer {layer}: references unknown node {node}")]
    UnknownNode { layer: LayerId, node: NodeId },
    #[error("layer {layer}: {kind} expects {expected} inputs, got {got}")]
    Arity {
        layer: LayerId,
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: invalid parameter: {reason}")]
    BadParam { layer: LayerId, reason: String },
    #[error("node {node}: produced by {count} layers, expected 1")]
    ProducerCount { node: NodeId, count: usize },
    #[error("expected exactly one input layer, found {0}")]
    InputCount(usize),
    #[error("input layer does not produce the declared input node {0}")]
    InputNode(NodeId),
    #[error("not a DAG: cycle through layer {layer}")]
    Cycle { layer: LayerId },
    #[error("node {node}: not reachable from the input node")]
    Unreachable { node: NodeId },
    #[error("node {node}: dangling, has no consumer and is not the output node")]
    Dangling { node: NodeId },
    #[error("output node {0} has consumers")]
    OutputConsumed(NodeId),
    #[error("output node {0} is not produced by a softmax layer")]
    MissingSoftmax(NodeId),
    #[error("add shape mismatch at layer {layer}: {a} vs {b}")]
    AddShapeMismatch {
        layer: LayerId,
        a: TensorShape,
        b: TensorShape,
    },
    #[error("concat spatial mismatch at layer {layer}: {a} vs {b}")]
    ConcatShapeMismatch {
        layer: LayerId,
        a: TensorShape,
        b: TensorShape,
    },
    #[error("layer {layer}: {reason}")]
    BadShape { layer: LayerId, reason: String },
    #[error("layer {layer}: output node {node} has shape {actual}, expected {expected}")]
    ShapeInconsistent {
        layer: LayerId,
        node: NodeId,
        actual: TensorShape,
        expected: TensorShape,
    },
    #[error("layer {layer}: width {width} does not match output channels {channels}")]
    WidthMismatch {
        layer: LayerId,
        width: u32,
        channels: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("num_classes must be at least 2, got {0}")]
    TooFewClasses(u32),
    #[error(transparent)]
    Invalid(#[from] Violation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchGraph {
    nodes: BTreeMap<NodeId, TensorShape>,
    layers: BTreeMap<LayerId, Layer>,
    input_node: NodeId,
    output_node: NodeId,
}

impl Hash for ArchGraph {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.input_node.hash(state);
        self.output_node.hash(state);
        for (id, shape) in &self.nodes {
            id.hash(state);
            shape.hash(state);
        }
        for layer in self.layers.values() {
            layer.hash(state);
        }
    }
}

impl ArchGraph {
    /// Assembles a graph without checking it. Call [`ArchGraph::validate`]
    /// before handing the result to anything else.
    pub fn from_parts_unchecked(
        nodes: BTreeMap<NodeId, TensorShape>,
        layers: BTreeMap<LayerId, Layer>,
        input_node: NodeId,
        output_node: NodeId,
    ) -> Self {
        ArchGraph {
            nodes,
            layers,
            input_node,
            output_node,
        }
    }

    pub fn from_parts(
        nodes: BTreeMap<NodeId, TensorShape>,
        layers: BTreeMap<LayerId, Layer>,
        input_node: NodeId,
        output_node: NodeId,
    ) -> Result<Self, Violation> {
        let g = Self::from_parts_unchecked(nodes, layers, input_node, output_node);
        g.validate()?;
        Ok(g)
    }

    /// The architecture used to seed every search: three conv blocks of
    /// `[ReLU, BatchNorm, Conv(3x3, 64), Pool]`, then global average pooling,
    /// dropout, `Dense(64)`, ReLU, `Dense(num_classes)` and softmax.
    pub fn default_cnn(input: TensorShape, num_classes: u32) -> Result<Self, BuildError> {
        if num_classes < 2 {
            return Err(BuildError::TooFewClasses(num_classes));
        }
        let mut b = GraphBuilder::new(input)?;
        for _ in 0..3 {
            b.push(LayerKind::ReLU)?;
            b.push(LayerKind::BatchNorm)?;
            b.push(LayerKind::Conv {
                kernel_size: 3,
                stride: 1,
                filters: 64,
            })?;
            b.push(LayerKind::Pool {
                window: 2,
                stride: 2,
            })?;
        }
        b.push(LayerKind::GlobalAvgPool)?;
        b.push(LayerKind::Dropout { rate: 0.25 })?;
        b.push(LayerKind::Dense { units: 64 })?;
        b.push(LayerKind::ReLU)?;
        b.push(LayerKind::Dense { units: num_classes })?;
        b.push(LayerKind::Softmax)?;
        Ok(b.finish()?)
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, TensorShape> {
        &self.nodes
    }

    pub fn layers(&self) -> &BTreeMap<LayerId, Layer> {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer> {
        self.layers.get(&id)
    }

    pub fn shape(&self, node: NodeId) -> Option<TensorShape> {
        self.nodes.get(&node).copied()
    }

    pub fn input_node(&self) -> NodeId {
        self.input_node
    }

    pub fn output_node(&self) -> NodeId {
        self.output_node
    }

    pub fn input_shape(&self) -> TensorShape {
        self.nodes[&self.input_node]
    }

    pub(crate) fn next_node_id(&self) -> NodeId {
        self.nodes.keys().next_back().map_or(0, |id| id + 1)
    }

    pub(crate) fn next_layer_id(&self) -> LayerId {
        self.layers.keys().next_back().map_or(0, |id| id + 1)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut BTreeMap<LayerId, Layer> {
        &mut self.layers
    }

    /// Adds a layer producing a fresh node; shapes are filled in by
    /// [`ArchGraph::reinfer_shapes`].
    pub(crate) fn insert_layer(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> (LayerId, NodeId) {
        let node = self.next_node_id();
        let id = self.next_layer_id();
        self.nodes.insert(node, TensorShape::flat(1));
        self.layers.insert(
            id,
            Layer {
                id,
                kind,
                inputs,
                output: node,
                width: 1,
            },
        );
        (id, node)
    }

    /// Stable 64-bit hash over ids, shapes and layers.
    pub fn structural_hash(&self) -> u64 {
        stable_hash(self)
    }

    /// Map node -> id of the layer producing it.
    pub fn producers(&self) -> HashMap<NodeId, LayerId> {
        self.layers.values().map(|l| (l.output, l.id)).collect()
    }

    pub fn producer_of(&self, node: NodeId) -> Option<&Layer> {
        self.layers.values().find(|l| l.output == node)
    }

    /// Map node -> ids of layers reading it, in layer-id order.
    pub fn consumers(&self) -> HashMap<NodeId, Vec<LayerId>> {
        let mut out: HashMap<NodeId, Vec<LayerId>> = HashMap::new();
        for l in self.layers.values() {
            for &n in &l.inputs {
                out.entry(n).or_default().push(l.id);
            }
        }
        out
    }

    /// Layers in a deterministic topological order (Kahn, smallest id first).
    pub fn topo_order(&self) -> Result<Vec<LayerId>, Violation> {
        let producers = self.producers();
        let consumers = self.consumers();
        let mut pending: HashMap<LayerId, usize> = HashMap::new();
        let mut ready = BTreeSet::new();
        for l in self.layers.values() {
            let distinct: HashSet<NodeId> = l.inputs.iter().copied().collect();
            let deps = distinct.iter().filter(|n| producers.contains_key(n)).count();
            if deps == 0 {
                ready.insert(l.id);
            } else {
                pending.insert(l.id, deps);
            }
        }
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            let out = self.layers[&id].output;
            let mut seen = HashSet::new();
            for &c in consumers.get(&out).map(Vec::as_slice).unwrap_or(&[]) {
                if !seen.insert(c) {
                    continue;
                }
                if let Some(n) = pending.get_mut(&c) {
                    *n -= 1;
                    if *n == 0 {
                        pending.remove(&c);
                        ready.insert(c);
                    }
                }
            }
        }
        match pending.keys().min() {
            Some(&layer) => Err(Violation::Cycle { layer }),
            None => Ok(order),
        }
    }

    /// Checks every structural invariant and reports the first violation.
    pub fn validate(&self) -> Result<(), Violation> {
        for (&node, &shape) in &self.nodes {
            if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
                return Err(Violation::DegenerateShape { node, shape });
            }
        }
        for l in self.layers.values() {
            for &n in l.inputs.iter().chain(std::iter::once(&l.output)) {
                if !self.nodes.contains_key(&n) {
                    return Err(Violation::UnknownNode { layer: l.id, node: n });
                }
            }
            if l.inputs.len() != l.kind.arity() {
                return Err(Violation::Arity {
                    layer: l.id,
                    kind: l.kind.name(),
                    expected: l.kind.arity(),
                    got: l.inputs.len(),
                });
            }
            l.kind.check_params(l.id)?;
        }
        let mut produced: HashMap<NodeId, usize> = HashMap::new();
        for l in self.layers.values() {
            *produced.entry(l.output).or_default() += 1;
        }
        for &node in self.nodes.keys() {
            let count = produced.get(&node).copied().unwrap_or(0);
            if count != 1 {
                return Err(Violation::ProducerCount { node, count });
            }
        }
        let inputs: Vec<&Layer> = self
            .layers
            .values()
            .filter(|l| l.kind == LayerKind::Input)
            .collect();
        if inputs.len() != 1 {
            return Err(Violation::InputCount(inputs.len()));
        }
        if inputs[0].output != self.input_node {
            return Err(Violation::InputNode(self.input_node));
        }
        let order = self.topo_order()?;

        let consumers = self.consumers();
        let mut seen = HashSet::from([self.input_node]);
        let mut queue = VecDeque::from([self.input_node]);
        while let Some(n) = queue.pop_front() {
            for c in consumers.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
                let out = self.layers[c].output;
                if seen.insert(out) {
                    queue.push_back(out);
                }
            }
        }
        if let Some(&node) = self.nodes.keys().find(|n| !seen.contains(n)) {
            return Err(Violation::Unreachable { node });
        }
        if consumers.contains_key(&self.output_node) {
            return Err(Violation::OutputConsumed(self.output_node));
        }
        if let Some(&node) = self
            .nodes
            .keys()
            .find(|n| **n != self.output_node && !consumers.contains_key(n))
        {
            return Err(Violation::Dangling { node });
        }
        match self.producer_of(self.output_node) {
            Some(l) if l.kind == LayerKind::Softmax => {}
            _ => return Err(Violation::MissingSoftmax(self.output_node)),
        }

        for id in order {
            let l = &self.layers[&id];
            let actual = self.nodes[&l.output];
            if l.kind != LayerKind::Input {
                let ins: Vec<TensorShape> = l.inputs.iter().map(|n| self.nodes[n]).collect();
                let expected = l.kind.infer_shape(l.id, &ins)?;
                if expected != actual {
                    return Err(Violation::ShapeInconsistent {
                        layer: l.id,
                        node: l.output,
                        actual,
                        expected,
                    });
                }
            }
            if l.width != actual.channels {
                return Err(Violation::WidthMismatch {
                    layer: l.id,
                    width: l.width,
                    channels: actual.channels,
                });
            }
        }
        Ok(())
    }

    /// Recomputes every non-input node shape and layer width from the layer
    /// kinds, then validates.
    pub(crate) fn reinfer_shapes(&mut self) -> Result<(), Violation> {
        for id in self.topo_order()? {
            let l = &self.layers[&id];
            if l.kind == LayerKind::Input {
                continue;
            }
            let mut ins = Vec::with_capacity(l.inputs.len());
            for n in &l.inputs {
                let s = self
                    .nodes
                    .get(n)
                    .copied()
                    .ok_or(Violation::UnknownNode { layer: id, node: *n })?;
                ins.push(s);
            }
            let shape = l.kind.infer_shape(id, &ins)?;
            let out = l.output;
            self.nodes.insert(out, shape);
            self.layers.get_mut(&id).expect("layer from topo order").width = shape.channels;
        }
        let input = self.input_node;
        for l in self.layers.values_mut() {
            if l.kind == LayerKind::Input {
                l.width = self.nodes[&input].channels;
            }
        }
        self.validate()
    }

    /// Trunk path and ranks. Assumes a valid graph.
    pub fn trunk(&self) -> Trunk {
        let producers = self.producers();
        let mut nodes = vec![self.output_node];
        let mut layers = Vec::new();
        let mut node = self.output_node;
        while let Some(&pid) = producers.get(&node) {
            let p = &self.layers[&pid];
            if p.kind == LayerKind::Input || nodes.len() > self.nodes.len() {
                break;
            }
            layers.push(pid);
            node = p.inputs[0];
            nodes.push(node);
        }
        nodes.reverse();
        layers.reverse();

        let mut ranks = Vec::with_capacity(nodes.len());
        let mut main_chain = Vec::new();
        let mut rank = 0u32;
        ranks.push(0);
        for &lid in &layers {
            if self.is_main_chain_kind(lid, &producers) {
                rank += 1;
                main_chain.push(lid);
            }
            ranks.push(rank);
        }
        let position = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        Trunk {
            nodes,
            layers,
            ranks,
            main_chain,
            position,
        }
    }

    fn is_main_chain_kind(&self, layer: LayerId, producers: &HashMap<NodeId, LayerId>) -> bool {
        let l = &self.layers[&layer];
        l.kind.is_weighted() && !self.is_reducer_with(l, producers)
    }

    /// A Conv/Dense that reads a Concat output: the width-restoring half of a
    /// concatenative skip-connection.
    pub fn is_reducer(&self, layer: LayerId) -> bool {
        let producers = self.producers();
        self.layers
            .get(&layer)
            .is_some_and(|l| self.is_reducer_with(l, &producers))
    }

    fn is_reducer_with(&self, l: &Layer, producers: &HashMap<NodeId, LayerId>) -> bool {
        l.kind.is_weighted()
            && l
                .inputs
                .first()
                .and_then(|n| producers.get(n))
                .is_some_and(|p| self.layers[p].kind == LayerKind::Concat)
    }

    /// True when the node is the output of a join or of a concat reducer.
    pub fn is_skip_output(&self, node: NodeId) -> bool {
        let producers = self.producers();
        match producers.get(&node) {
            Some(p) => {
                let l = &self.layers[p];
                l.kind.is_join() || self.is_reducer_with(l, &producers)
            }
            None => false,
        }
    }

    /// Main-chain layers (trunk Conv/Dense, excluding concat reducers) in
    /// topological order.
    pub fn main_chain(&self) -> Vec<&Layer> {
        self.trunk()
            .main_chain
            .iter()
            .map(|id| &self.layers[id])
            .collect()
    }

    /// Node-level skip connections: (start node, end node, layer, kind).
    /// The end node is the trunk node the join was attached after.
    pub fn skip_connections(&self) -> Vec<SkipConnection> {
        let trunk = self.trunk();
        let producers = self.producers();
        let mut out = Vec::new();
        for l in self.layers.values() {
            let kind = match l.kind {
                LayerKind::Add => SkipKind::Add,
                LayerKind::Concat => SkipKind::Concat,
                _ => continue,
            };
            if !trunk.contains(l.inputs[0]) {
                continue;
            }
            let Some(start) = self.trace_to_trunk(l.inputs[1], &trunk, &producers) else {
                continue;
            };
            let end = self.base_of(l.inputs[0], &producers);
            let (ru, rv) = (trunk.rank(start), trunk.rank(l.inputs[0]));
            match (ru, rv) {
                (Some(ru), Some(rv)) if ru < rv => out.push(SkipConnection {
                    start,
                    end,
                    join: l.id,
                    descriptor: SkipDescriptor {
                        start_rank: ru,
                        span: rv - ru,
                        kind,
                    },
                }),
                _ => {}
            }
        }
        out
    }

    /// One descriptor per skip-connection, sorted by (start_rank, span, kind).
    pub fn skip_set(&self) -> Vec<SkipDescriptor> {
        let mut s: Vec<SkipDescriptor> = self
            .skip_connections()
            .into_iter()
            .map(|c| c.descriptor)
            .collect();
        s.sort();
        s
    }

    pub fn summary(&self) -> StructuralSummary {
        StructuralSummary {
            widths: self.main_chain().iter().map(|l| l.width).collect(),
            skips: self.skip_set(),
        }
    }

    fn trace_to_trunk(
        &self,
        mut node: NodeId,
        trunk: &Trunk,
        producers: &HashMap<NodeId, LayerId>,
    ) -> Option<NodeId> {
        for _ in 0..=self.nodes.len() {
            if trunk.contains(node) {
                return Some(node);
            }
            let p = &self.layers[producers.get(&node)?];
            node = *p.inputs.first()?;
        }
        None
    }

    /// Walks back through joins and reducers to the node a skip was attached after.
    fn base_of(&self, mut node: NodeId, producers: &HashMap<NodeId, LayerId>) -> NodeId {
        while let Some(p) = producers.get(&node).map(|p| &self.layers[p]) {
            if p.kind.is_join() || self.is_reducer_with(p, producers) {
                node = p.inputs[0];
            } else {
                break;
            }
        }
        node
    }

    /// Parameters plus `batch` copies of every node tensor, in bytes.
    pub fn estimate_memory(&self, batch: u64) -> u64 {
        let params: u64 = self
            .layers
            .values()
            .map(|l| {
                let input = l.inputs.first().map(|n| self.nodes[n]);
                l.kind.parameter_count(input, self.nodes[&l.output])
            })
            .sum();
        let activations: u64 = self.nodes.values().map(TensorShape::elements).sum();
        BYTES_PER_ELEMENT * (params + batch * activations)
    }

    /// Numbers of each layer kind, keyed by kind name.
    pub fn kind_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for l in self.layers.values() {
            *m.entry(l.kind.name()).or_default() += 1;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipConnection {
    pub start: NodeId,
    pub end: NodeId,
    pub join: LayerId,
    pub descriptor: SkipDescriptor,
}

/// The input-to-output trunk of a graph.
#[derive(Debug, Clone)]
pub struct Trunk {
    /// Trunk nodes from input to output.
    pub nodes: Vec<NodeId>,
    /// `layers[i]` produces `nodes[i + 1]`.
    pub layers: Vec<LayerId>,
    /// `ranks[i]`: main-chain layers at or before `nodes[i]`.
    pub ranks: Vec<u32>,
    pub main_chain: Vec<LayerId>,
    position: HashMap<NodeId, usize>,
}

impl Trunk {
    pub fn contains(&self, node: NodeId) -> bool {
        self.position.contains_key(&node)
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.position.get(&node).copied()
    }

    pub fn rank(&self, node: NodeId) -> Option<u32> {
        self.position(node).map(|i| self.ranks[i])
    }

    /// The trunk layer reading `node`, if `node` is on the trunk and not the output.
    pub fn consumer(&self, node: NodeId) -> Option<LayerId> {
        self.position(node).and_then(|i| self.layers.get(i).copied())
    }

    /// Trunk layers strictly after `from` up to and including the producer of `to`.
    pub fn layers_between(&self, from: NodeId, to: NodeId) -> &[LayerId] {
        match (self.position(from), self.position(to)) {
            (Some(a), Some(b)) if a < b => &self.layers[a..b],
            _ => &[],
        }
    }
}

/// Appends layers one at a time with shape inference.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    graph: ArchGraph,
    current: NodeId,
}

impl GraphBuilder {
    pub fn new(input: TensorShape) -> Result<Self, Violation> {
        if input.height == 0 || input.width == 0 || input.channels == 0 {
            return Err(Violation::DegenerateShape {
                node: 0,
                shape: input,
            });
        }
        let mut graph = ArchGraph {
            nodes: BTreeMap::from([(0, input)]),
            layers: BTreeMap::new(),
            input_node: 0,
            output_node: 0,
        };
        graph.layers.insert(
            0,
            Layer {
                id: 0,
                kind: LayerKind::Input,
                inputs: vec![],
                output: 0,
                width: input.channels,
            },
        );
        Ok(GraphBuilder { graph, current: 0 })
    }

    pub fn current(&self) -> NodeId {
        self.current
    }

    pub fn push(&mut self, kind: LayerKind) -> Result<NodeId, Violation> {
        self.add(kind, vec![self.current])
    }

    pub fn push_from(&mut self, from: NodeId, kind: LayerKind) -> Result<NodeId, Violation> {
        self.add(kind, vec![from])
    }

    /// Joins `trunk` and `branch`; the trunk operand is listed first.
    pub fn join(&mut self, kind: LayerKind, trunk: NodeId, branch: NodeId) -> Result<NodeId, Violation> {
        self.add(kind, vec![trunk, branch])
    }

    fn add(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> Result<NodeId, Violation> {
        let id = self.graph.next_layer_id();
        kind.check_params(id)?;
        let mut shapes = Vec::with_capacity(inputs.len());
        for n in &inputs {
            shapes.push(
                self.graph
                    .shape(*n)
                    .ok_or(Violation::UnknownNode { layer: id, node: *n })?,
            );
        }
        let shape = kind.infer_shape(id, &shapes)?;
        let node = self.graph.next_node_id();
        self.graph.nodes.insert(node, shape);
        self.graph.layers.insert(
            id,
            Layer {
                id,
                kind,
                inputs,
                output: node,
                width: shape.channels,
            },
        );
        self.current = node;
        Ok(node)
    }

    /// Marks the current node as output and validates.
    pub fn finish(mut self) -> Result<ArchGraph, Violation> {
        self.graph.output_node = self.current;
        self.graph.validate()?;
        Ok(self.graph)
    }
}
