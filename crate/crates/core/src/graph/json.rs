use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchGraph, Layer, LayerId, LayerKind, NodeId, TensorShape, Violation};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JsonError {
    #[error("malformed architecture document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("layer {layer}: bad params: {source}")]
    Params {
        layer: LayerId,
        source: serde_json::Error,
    },
    #[error("unsupported architecture format version {0}")]
    Version(u32),
    #[error("duplicate {what} id {id}")]
    DuplicateId { what: &'static str, id: u32 },
    #[error("invalid architecture: {0}")]
    Invalid(#[from] Violation),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    version: u32,
    input_node: NodeId,
    output_node: NodeId,
    nodes: Vec<NodeDoc>,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    shape: [u32; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    id: LayerId,
    kind: KindName,
    #[serde(default)]
    params: serde_json::Value,
    inputs: Vec<NodeId>,
    output: NodeId,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindName {
    Input,
    Conv,
    Dense,
    Relu,
    BatchNorm,
    Pool,
    GlobalAvgPool,
    Dropout,
    Softmax,
    Add,
    Concat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    kernel_size: u32,
    stride: u32,
    filters: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseParams {
    units: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolParams {
    window: u32,
    stride: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DropoutParams {
    rate: f64,
}

fn encode_kind(k: LayerKind) -> (KindName, serde_json::Value) {
    use serde_json::to_value;
    let v = match k {
        LayerKind::Conv {
            kernel_size,
            stride,
            filters,
        } => to_value(ConvParams {
            kernel_size,
            stride,
            filters,
        }),
        LayerKind::Dense { units } => to_value(DenseParams { units }),
        LayerKind::Pool { window, stride } => to_value(PoolParams { window, stride }),
        LayerKind::Dropout { rate } => to_value(DropoutParams { rate }),
        _ => to_value(Empty {}),
    }
    .expect("layer params serialize");
    let name = match k {
        LayerKind::Input => KindName::Input,
        LayerKind::Conv { .. } => KindName::Conv,
        LayerKind::Dense { .. } => KindName::Dense,
        LayerKind::ReLU => KindName::Relu,
        LayerKind::BatchNorm => KindName::BatchNorm,
        LayerKind::Pool { .. } => KindName::Pool,
        LayerKind::GlobalAvgPool => KindName::GlobalAvgPool,
        LayerKind::Dropout { .. } => KindName::Dropout,
        LayerKind::Softmax => KindName::Softmax,
        LayerKind::Add => KindName::Add,
        LayerKind::Concat => KindName::Concat,
    };
    (name, v)
}

fn decode_kind(name: KindName, params: serde_json::Value) -> Result<LayerKind, serde_json::Error> {
    use serde_json::from_value;
    let params = if params.is_null() {
        serde_json::json!({})
    } else {
        params
    };
    Ok(match name {
        KindName::Conv => {
            let p: ConvParams = from_value(params)?;
            LayerKind::Conv {
                kernel_size: p.kernel_size,
                stride: p.stride,
                filters: p.filters,
            }
        }
        KindName::Dense => LayerKind::Dense {
            units: from_value::<DenseParams>(params)?.units,
        },
        KindName::Pool => {
            let p: PoolParams = from_value(params)?;
            LayerKind::Pool {
                window: p.window,
                stride: p.stride,
            }
        }
        KindName::Dropout => LayerKind::Dropout {
            rate: from_value::<DropoutParams>(params)?.rate,
        },
        other => {
            from_value::<Empty>(params)?;
            match other {
                KindName::Input => LayerKind::Input,
                KindName::Relu => LayerKind::ReLU,
                KindName::BatchNorm => LayerKind::BatchNorm,
                KindName::GlobalAvgPool => LayerKind::GlobalAvgPool,
                KindName::Softmax => LayerKind::Softmax,
                KindName::Add => LayerKind::Add,
                _ => LayerKind::Concat,
            }
        }
    })
}

impl ArchGraph {
    fn to_doc(&self) -> GraphDoc {
        GraphDoc {
            version: FORMAT_VERSION,
            input_node: self.input_node,
            output_node: self.output_node,
            nodes: self
                .nodes
                .iter()
                .map(|(&id, s)| NodeDoc {
                    id,
                    shape: [s.height, s.width, s.channels],
                })
                .collect(),
            layers: self
                .layers
                .values()
                .map(|l| {
                    let (kind, params) = encode_kind(l.kind);
                    LayerDoc {
                        id: l.id,
                        kind,
                        params,
                        inputs: l.inputs.clone(),
                        output: l.output,
                    }
                })
                .collect(),
        }
    }

    fn from_doc(doc: GraphDoc) -> Result<Self, JsonError> {
        if doc.version != FORMAT_VERSION {
            return Err(JsonError::Version(doc.version));
        }
        let mut nodes = BTreeMap::new();
        for n in doc.nodes {
            let [h, w, c] = n.shape;
            if nodes.insert(n.id, TensorShape::new(h, w, c)).is_some() {
                return Err(JsonError::DuplicateId {
                    what: "node",
                    id: n.id,
                });
            }
        }
        let mut layers = BTreeMap::new();
        for l in doc.layers {
            let width = nodes.get(&l.output).map_or(0, |s| s.channels);
            let kind = decode_kind(l.kind, l.params).map_err(|e| JsonError::Params {
                layer: l.id,
                source: e,
            })?;
            let layer = Layer {
                id: l.id,
                kind,
                inputs: l.inputs,
                output: l.output,
                width,
            };
            if layers.insert(l.id, layer).is_some() {
                return Err(JsonError::DuplicateId {
                    what: "layer",
                    id: l.id,
                });
            }
        }
        Ok(ArchGraph::from_parts(
            nodes,
            layers,
            doc.input_node,
            doc.output_node,
        )?)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self.to_doc()).expect("graph document serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, JsonError> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self, JsonError> {
        Self::from_doc(serde_json::from_value(value)?)
    }
}

impl Serialize for ArchGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArchGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GraphDoc::deserialize(d)?;
        ArchGraph::from_doc(doc).map_err(serde::de::Error::custom)
    }
}
