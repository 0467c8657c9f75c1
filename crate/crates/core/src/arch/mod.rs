//! Architecture description files: a JSON DAG of typed layer nodes with
//! column labels, plus validation, shape inference, complexity counters, the
//! design-constraint indicator, model instantiation and weight files.

mod builder;
mod counters;
mod indicator;
mod model;
mod shapes;
pub mod weights;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::TensorError;

pub use builder::{reference_layout, reference_spec, ArchBuilder, ReferenceWidths, REFERENCE_SPEC_JSON};
pub use counters::{count_macs, count_macs_with, count_params, node_macs, node_params, CostModel};
pub use indicator::{indicator, parallel_width, ConstraintSet, IndicatorResult, Violation};
pub use model::{argmax_rows, Model, NodeCache, Trace};
pub use shapes::infer_shapes;

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("syntax error at line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("invalid architecture file: {0}")]
    Schema(String),
    #[error("unsupported spec version {0} (expected {SPEC_VERSION})")]
    Version(u32),
    #[error("node `{id}`: unknown op kind `{op}`")]
    UnknownOp { id: String, op: String },
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{id}` references unknown input `{input}`")]
    UnknownInput { id: String, input: String },
    #[error("expected exactly one `{kind}` node, found {count}")]
    Endpoint { kind: &'static str, count: usize },
    #[error("node `{id}` expects {expected} input(s), got {actual}")]
    Arity { id: String, expected: &'static str, actual: usize },
    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("node `{id}` is dead: {reason}")]
    DeadNode { id: String, reason: &'static str },
    #[error("node `{id}`: {msg}")]
    Hyperparameter { id: String, msg: String },
    #[error("node `{id}`: shape mismatch: {msg}")]
    Shape { id: String, msg: String },
    #[error("node `{id}`: {source}")]
    Tensor {
        id: String,
        #[source]
        source: TensorError,
    },
    #[error("input shape {actual} does not match spec input {expected}")]
    InputShape { expected: String, actual: String },
}

pub type Result<T> = std::result::Result<T, ArchError>;

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

fn default_blur() -> usize {
    3
}

/// Layer vocabulary. Serialized as an `op` tag plus op-specific fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input,
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        bias: bool,
    },
    DepthwiseConv {
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        bias: bool,
    },
    PointwiseConv {
        out_channels: usize,
        stride: usize,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        bias: bool,
    },
    Vac {
        condense_kernel: usize,
        condense_stride: usize,
        mid_channels: usize,
        embed_kernel: usize,
    },
    Aads {
        #[serde(default = "default_blur")]
        blur_size: usize,
        stride: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Batchnorm,
    Gap,
    Fc {
        out_features: usize,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        bias: bool,
    },
    Concat,
    Output,
}

pub const OP_KINDS: [&str; 13] = [
    "input",
    "conv",
    "depthwise_conv",
    "pointwise_conv",
    "vac",
    "aads",
    "maxpool",
    "relu",
    "batchnorm",
    "gap",
    "fc",
    "concat",
    "output",
];

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { .. } => "conv",
            Op::DepthwiseConv { .. } => "depthwise_conv",
            Op::PointwiseConv { .. } => "pointwise_conv",
            Op::Vac { .. } => "vac",
            Op::Aads { .. } => "aads",
            Op::Maxpool { .. } => "maxpool",
            Op::Relu => "relu",
            Op::Batchnorm => "batchnorm",
            Op::Gap => "gap",
            Op::Fc { .. } => "fc",
            Op::Concat => "concat",
            Op::Output => "output",
        }
    }

    /// Stride of the op, when it has one.
    pub fn stride(&self) -> Option<usize> {
        match *self {
            Op::Conv { stride, .. }
            | Op::DepthwiseConv { stride, .. }
            | Op::PointwiseConv { stride, .. }
            | Op::Aads { stride, .. }
            | Op::Maxpool { stride, .. } => Some(stride),
            _ => None,
        }
    }

    fn arity(&self) -> (&'static str, fn(usize) -> bool) {
        match self {
            Op::Input => ("0", |n| n == 0),
            Op::Concat => (">= 1", |n| n >= 1),
            _ => ("1", |n| n == 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    /// Advisory column label; structural analysis does not rely on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
}

/// Pixel preprocessing: `(pixel * scale - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            scale: 1.0 / 255.0,
            mean: 0.5,
            std: 0.25,
        }
    }
}

impl Normalization {
    pub fn apply(&self, pixel: f64) -> f64 {
        (pixel * self.scale - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub input_shape: [usize; 4],
    #[serde(default)]
    pub normalization: Normalization,
    pub nodes: Vec<NodeSpec>,
    /// Free-form provenance (generator seed, notes).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Resolved graph structure of a validated spec, indexed by node position.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub order: Vec<usize>,
    pub inputs: Vec<Vec<usize>>,
    pub consumers: Vec<Vec<usize>>,
    pub input: usize,
    pub output: usize,
    /// Longest-path distance (in edges) from the input node.
    pub depth: Vec<usize>,
}

impl Topology {
    /// Position of each node along the longest input-to-output path, in [0, 1].
    pub fn depth_fraction(&self) -> Vec<f64> {
        let total = self.depth[self.output].max(1) as f64;
        self.depth.iter().map(|&d| d as f64 / total).collect()
    }
}

/// Parses an architecture file and validates its structure.
pub fn parse_spec(text: &str) -> Result<ArchSpec> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ArchError::Syntax {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    if let Some(nodes) = value.get("nodes").and_then(|n| n.as_array()) {
        for (i, node) in nodes.iter().enumerate() {
            let id = node
                .get("id")
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .unwrap_or_else(|| format!("#{i}"));
            match node.get("op").and_then(|v| v.as_str()) {
                Some(op) if OP_KINDS.contains(&op) => {}
                Some(op) => return Err(ArchError::UnknownOp { id, op: op.to_owned() }),
                None => return Err(ArchError::Schema(format!("node `{id}` has no string `op` field"))),
            }
        }
    }
    let spec: ArchSpec = serde_json::from_value(value).map_err(|e| ArchError::Schema(e.to_string()))?;
    spec.topology()?;
    Ok(spec)
}

impl ArchSpec {
    pub fn input_shape(&self) -> crate::Shape {
        self.input_shape.into()
    }

    /// Canonical text form: pretty JSON with fixed key order and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the canonical form of the graph (name and meta excluded).
    pub fn structural_hash(&self) -> String {
        let mut bare = self.clone();
        bare.name.clear();
        bare.meta.clear();
        let digest = Sha256::digest(bare.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Column label per node id.
    pub fn columns(&self) -> BTreeMap<&str, &str> {
        self.nodes
            .iter()
            .filter_map(|n| n.column.as_deref().map(|c| (n.id.as_str(), c)))
            .collect()
    }

    /// Structural validation: ids, endpoints, arity, references, acyclicity
    /// and liveness. Hyperparameters and shapes are checked by
    /// [`infer_shapes`].
    pub fn topology(&self) -> Result<Topology> {
        if self.version != SPEC_VERSION {
            return Err(ArchError::Version(self.version));
        }
        let mut index = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(ArchError::DuplicateId(n.id.clone()));
            }
        }
        for (kind, pred) in [("input", Op::Input), ("output", Op::Output)] {
            let count = self.nodes.iter().filter(|n| n.op == pred).count();
            if count != 1 {
                return Err(ArchError::Endpoint { kind, count });
            }
        }
        let mut inputs = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let (expected, ok) = n.op.arity();
            if !ok(n.inputs.len()) {
                return Err(ArchError::Arity {
                    id: n.id.clone(),
                    expected,
                    actual: n.inputs.len(),
                });
            }
            let ins = n
                .inputs
                .iter()
                .map(|s| {
                    index.get(s.as_str()).copied().ok_or_else(|| ArchError::UnknownInput {
                        id: n.id.clone(),
                        input: s.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            inputs.push(ins);
        }
        let mut consumers = vec![Vec::new(); self.nodes.len()];
        for (i, ins) in inputs.iter().enumerate() {
            for &j in ins {
                consumers[j].push(i);
            }
        }
        let order = self.topo_order(&inputs)?;
        let input = self.nodes.iter().position(|n| n.op == Op::Input).unwrap();
        let output = self.nodes.iter().position(|n| n.op == Op::Output).unwrap();

        let mut depth = vec![0usize; self.nodes.len()];
        let mut reached = vec![false; self.nodes.len()];
        reached[input] = true;
        for &i in &order {
            for &j in &inputs[i] {
                if reached[j] {
                    reached[i] = true;
                    depth[i] = depth[i].max(depth[j] + 1);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(ArchError::DeadNode {
                id: self.nodes[i].id.clone(),
                reason: "not reachable from the input node",
            });
        }
        let mut feeds = vec![false; self.nodes.len()];
        feeds[output] = true;
        for &i in order.iter().rev() {
            if consumers[i].iter().any(|&c| feeds[c]) {
                feeds[i] = true;
            }
        }
        if let Some(i) = feeds.iter().position(|r| !r) {
            return Err(ArchError::DeadNode {
                id: self.nodes[i].id.clone(),
                reason: "does not reach the output node",
            });
        }
        Ok(Topology {
            order,
            inputs,
            consumers,
            input,
            output,
            depth,
        })
    }

    fn topo_order(&self, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let n = self.nodes.len();
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            stack.push((root, 0));
            state[root] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if *next < inputs[node].len() {
                    let dep = inputs[node][*next];
                    *next += 1;
                    match state[dep] {
                        0 => {
                            state[dep] = 1;
                            stack.push((dep, 0));
                        }
                        1 => {
                            let start = stack.iter().position(|&(v, _)| v == dep).unwrap();
                            // stack holds consumer -> input links; report in data-flow order
                            let mut cycle = vec![self.nodes[dep].id.clone()];
                            cycle.extend(stack[start + 1..].iter().rev().map(|&(v, _)| self.nodes[v].id.clone()));
                            cycle.push(self.nodes[dep].id.clone());
                            return Err(ArchError::Cycle(cycle));
                        }
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    order.push(node);
                    stack.pop();
                }
            }
        }
        Ok(order)
    }

    /// Position of every node along the longest input-to-output path.
    pub fn depth_fraction(&self) -> Result<BTreeMap<String, f64>> {
        let topo = self.topology()?;
        Ok(self
            .nodes
            .iter()
            .zip(topo.depth_fraction())
            .map(|(n, d)| (n.id.clone(), d))
            .collect())
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}
