use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{DType, QuantParams, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

impl Padding {
    /// Output length and leading pad for one spatial axis.
    pub fn output_dim(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let needed = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, needed / 2))
            }
            Padding::Valid => {
                if input < kernel {
                    None
                } else {
                    Some(((input - kernel) / stride + 1, 0))
                }
            }
        }
    }
}

/// Activation folded into a conv or dense producer by operator fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusedActivation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl FusedActivation {
    pub fn is_none(&self) -> bool {
        matches!(self, FusedActivation::None)
    }
}

/// Which part of the classifier a node belongs to. Stage-one training
/// freezes the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Input,
    Conv2D {
        weight: String,
        #[serde(default)]
        bias: Option<String>,
        stride: usize,
        padding: Padding,
        #[serde(default)]
        activation: FusedActivation,
    },
    DepthwiseConv2D {
        weight: String,
        #[serde(default)]
        bias: Option<String>,
        stride: usize,
        padding: Padding,
        #[serde(default)]
        activation: FusedActivation,
    },
    Dense {
        weight: String,
        #[serde(default)]
        bias: Option<String>,
        #[serde(default)]
        activation: FusedActivation,
        /// L2 penalty coefficient applied to the kernel during training.
        #[serde(default)]
        l2: f32,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        mean: String,
        variance: String,
        epsilon: f32,
    },
    ReLU,
    ReLU6,
    Softmax,
    GlobalAvgPool,
    Dropout {
        rate: f32,
    },
    Add,
    Concat,
    FakeQuant {
        /// Three-element tensor: running min, running max, initialized flag.
        state: String,
    },
}

/// Every node kind name accepted in serialized graphs.
pub const NODE_KINDS: &[&str] = &[
    "Input",
    "Conv2D",
    "DepthwiseConv2D",
    "Dense",
    "BatchNorm",
    "ReLU",
    "ReLU6",
    "Softmax",
    "GlobalAvgPool",
    "Dropout",
    "Add",
    "Concat",
    "FakeQuant",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    NonTrainable,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "Input",
            Op::Conv2D { .. } => "Conv2D",
            Op::DepthwiseConv2D { .. } => "DepthwiseConv2D",
            Op::Dense { .. } => "Dense",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::ReLU => "ReLU",
            Op::ReLU6 => "ReLU6",
            Op::Softmax => "Softmax",
            Op::GlobalAvgPool => "GlobalAvgPool",
            Op::Dropout { .. } => "Dropout",
            Op::Add => "Add",
            Op::Concat => "Concat",
            Op::FakeQuant { .. } => "FakeQuant",
        }
    }

    /// Tensor names referenced by this op together with their role.
    pub fn weight_refs(&self) -> Vec<(&str, ParamRole)> {
        use ParamRole::*;
        match self {
            Op::Conv2D { weight, bias, .. }
            | Op::DepthwiseConv2D { weight, bias, .. }
            | Op::Dense { weight, bias, .. } => {
                let mut refs = vec![(weight.as_str(), Trainable)];
                if let Some(b) = bias {
                    refs.push((b.as_str(), Trainable));
                }
                refs
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                variance,
                ..
            } => vec![
                (gamma.as_str(), Trainable),
                (beta.as_str(), Trainable),
                (mean.as_str(), NonTrainable),
                (variance.as_str(), NonTrainable),
            ],
            Op::FakeQuant { state } => vec![(state.as_str(), NonTrainable)],
            _ => Vec::new(),
        }
    }

    pub fn is_training_only(&self) -> bool {
        matches!(self, Op::Dropout { .. } | Op::FakeQuant { .. })
    }

    pub fn fused_activation(&self) -> Option<FusedActivation> {
        match self {
            Op::Conv2D { activation, .. }
            | Op::DepthwiseConv2D { activation, .. }
            | Op::Dense { activation, .. } => Some(*activation),
            _ => None,
        }
    }

    fn arity(&self) -> (usize, Option<usize>) {
        match self {
            Op::Input => (0, Some(0)),
            Op::Add => (2, Some(2)),
            Op::Concat => (1, None),
            _ => (1, Some(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default)]
    pub inputs: Vec<NodeId>,
    #[serde(default)]
    pub scope: Scope,
    /// Quantization parameters of this node's output activation (INT8 graphs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_quant: Option<QuantParams>,
}

/// A classifier graph: nodes in topological order plus the weight tensors
/// they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// Per-sample input shape, `[height, width, channels]`.
    pub input_shape: [usize; 3],
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<String, Tensor>,
    pub class_names: Vec<String>,
    /// Activation ranges recorded by fake-quant nodes before they were stripped,
    /// keyed by the name of the producing node.
    pub recorded_ranges: BTreeMap<String, [f32; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    IdMismatch { position: usize, id: NodeId },
    Cycle { node: String, input: NodeId },
    DanglingInput { node: String, input: NodeId },
    DanglingTensor { node: String, tensor: String },
    Arity { node: String, expected: String, got: usize },
    ShapeMismatch { node: String, detail: String },
    BadAttr { node: String, detail: String },
    BadTensor { tensor: String, detail: String },
    MisplacedInput { position: usize },
    OutputCount { outputs: Vec<String> },
    OutputNotSoftmax { node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IdMismatch { position, id } => {
                write!(f, "node at position {position} has id {id}")
            }
            Violation::Cycle { node, input } => {
                write!(f, "{node}: input {input} does not precede it (cycle)")
            }
            Violation::DanglingInput { node, input } => {
                write!(f, "{node}: input node {input} does not exist")
            }
            Violation::DanglingTensor { node, tensor } => {
                write!(f, "{node}: tensor {tensor:?} is missing")
            }
            Violation::Arity { node, expected, got } => {
                write!(f, "{node}: expected {expected} inputs, got {got}")
            }
            Violation::ShapeMismatch { node, detail } => write!(f, "{node}: shape mismatch: {detail}"),
            Violation::BadAttr { node, detail } => write!(f, "{node}: {detail}"),
            Violation::BadTensor { tensor, detail } => write!(f, "tensor {tensor:?}: {detail}"),
            Violation::MisplacedInput { position } => {
                write!(f, "input node must be the single node at position 0 (found at {position})")
            }
            Violation::OutputCount { outputs } => {
                write!(f, "expected exactly one output node, found {outputs:?}")
            }
            Violation::OutputNotSoftmax { node } => write!(f, "output node {node} is not Softmax"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            total: self.total + o.total,
            trainable: self.trainable + o.trainable,
            non_trainable: self.non_trainable + o.non_trainable,
        }
    }
}

impl Graph {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Graph {
            input_shape,
            nodes: Vec::new(),
            tensors: BTreeMap::new(),
            class_names: Vec::new(),
            recorded_ranges: BTreeMap::new(),
        }
    }

    pub fn output(&self) -> Option<&Node> {
        self.nodes.last()
    }

    pub fn num_classes(&self) -> usize {
        self.infer_shapes()
            .ok()
            .and_then(|s| s.last().map(|s| s[0]))
            .unwrap_or(0)
    }

    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Consumers of each node, indexed by node id.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                if i < out.len() {
                    out[i].push(n.id);
                }
            }
        }
        out
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Per-sample output shape of every node (`[h, w, c]` or `[features]`).
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, Vec<Violation>> {
        let (shapes, violations) = self.check();
        if violations.is_empty() {
            Ok(shapes.into_iter().map(|s| s.unwrap_or_default()).collect())
        } else {
            Err(violations)
        }
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let (_, violations) = self.check();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Walks the whole graph collecting every violation rather than stopping
    /// at the first.
    fn check(&self) -> (Vec<Option<Vec<usize>>>, Vec<Violation>) {
        let mut v = Vec::new();
        let mut shapes: Vec<Option<Vec<usize>>> = vec![None; self.nodes.len()];

        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                v.push(Violation::IdMismatch { position: pos, id: node.id });
            }
            if matches!(node.op, Op::Input) != (pos == 0) {
                v.push(Violation::MisplacedInput { position: pos });
            }
            let (lo, hi) = node.op.arity();
            let n_in = node.inputs.len();
            if n_in < lo || hi.is_some_and(|h| n_in > h) {
                let expected = match hi {
                    Some(h) if h == lo => format!("{lo}"),
                    Some(h) => format!("{lo}..={h}"),
                    None => format!("at least {lo}"),
                };
                v.push(Violation::Arity {
                    node: node.name.clone(),
                    expected,
                    got: n_in,
                });
            }
            let mut input_shapes = Vec::with_capacity(n_in);
            for &i in &node.inputs {
                if i >= self.nodes.len() {
                    v.push(Violation::DanglingInput { node: node.name.clone(), input: i });
                    input_shapes.push(None);
                } else if i >= pos {
                    v.push(Violation::Cycle { node: node.name.clone(), input: i });
                    input_shapes.push(None);
                } else {
                    input_shapes.push(shapes[i].clone());
                }
            }
            let mut missing_tensor = false;
            for (t, _) in node.op.weight_refs() {
                if !self.tensors.contains_key(t) {
                    v.push(Violation::DanglingTensor {
                        node: node.name.clone(),
                        tensor: t.to_string(),
                    });
                    missing_tensor = true;
                }
            }
            if !missing_tensor && input_shapes.iter().all(Option::is_some) {
                let ins: Vec<Vec<usize>> = input_shapes.into_iter().flatten().collect();
                match self.node_shape(node, &ins) {
                    Ok(s) => shapes[pos] = Some(s),
                    Err(e) => v.push(e),
                }
            }
        }

        if !self.nodes.is_empty() {
            let consumers = self.consumers();
            let outputs: Vec<String> = self
                .nodes
                .iter()
                .filter(|n| consumers[n.id.min(consumers.len() - 1)].is_empty())
                .map(|n| n.name.clone())
                .collect();
            if outputs.len() != 1 {
                v.push(Violation::OutputCount { outputs });
            }
            let last = self.nodes.last().unwrap();
            if !matches!(last.op, Op::Softmax) {
                v.push(Violation::OutputNotSoftmax { node: last.name.clone() });
            }
        }

        for (name, t) in &self.tensors {
            if t.data.len() != t.numel() {
                v.push(Violation::BadTensor {
                    tensor: name.clone(),
                    detail: format!("{} elements for shape {:?}", t.data.len(), t.shape),
                });
            }
            if t.shape.contains(&0) {
                v.push(Violation::BadTensor {
                    tensor: name.clone(),
                    detail: "zero-sized dimension".into(),
                });
            }
            let needs_quant = matches!(t.dtype(), DType::I8 | DType::F16 | DType::I32);
            if needs_quant != t.quant.is_some() {
                v.push(Violation::BadTensor {
                    tensor: name.clone(),
                    detail: format!("{:?} tensor with quant={}", t.dtype(), t.quant.is_some()),
                });
            }
            if let Some(Err(e)) = t.quant.as_ref().map(QuantParams::check) {
                v.push(Violation::BadTensor { tensor: name.clone(), detail: e });
            }
        }
        for node in &self.nodes {
            if let Op::Conv2D { weight, .. } | Op::DepthwiseConv2D { weight, .. } | Op::Dense { weight, .. } = &node.op {
                if self.tensors.get(weight).is_some_and(|t| t.dtype() == DType::I32) {
                    v.push(Violation::BadTensor {
                        tensor: weight.clone(),
                        detail: "I32 is only valid for bias vectors".into(),
                    });
                }
            }
        }
        (shapes, v)
    }

    pub(crate) fn node_shape(&self, node: &Node, ins: &[Vec<usize>]) -> Result<Vec<usize>, Violation> {
        let name = &node.name;
        let mismatch = |detail: String| Violation::ShapeMismatch { node: name.clone(), detail };
        let bad = |detail: String| Violation::BadAttr { node: name.clone(), detail };
        let tshape = |t: &str| self.tensors[t].shape.clone();
        let check_bias = |bias: &Option<String>, n: usize| -> Result<(), Violation> {
            if let Some(b) = bias {
                if tshape(b) != [n] {
                    return Err(mismatch(format!("bias {:?} expected [{n}]", tshape(b))));
                }
            }
            Ok(())
        };

        match &node.op {
            Op::Input => Ok(self.input_shape.to_vec()),
            Op::Conv2D { weight, bias, stride, padding, .. } | Op::DepthwiseConv2D { weight, bias, stride, padding, .. } => {
                let x = &ins[0];
                if x.len() != 3 {
                    return Err(mismatch(format!("expected rank-3 activation, got {x:?}")));
                }
                if *stride == 0 {
                    return Err(bad("stride must be positive".into()));
                }
                let w = tshape(weight);
                if w.len() != 4 {
                    return Err(mismatch(format!("weight rank {} != 4", w.len())));
                }
                let depthwise = matches!(node.op, Op::DepthwiseConv2D { .. });
                let out_c = if depthwise {
                    if w[0] != 1 || w[3] != x[2] {
                        return Err(mismatch(format!("depthwise weight {w:?} vs {} channels", x[2])));
                    }
                    x[2]
                } else {
                    if w[3] != x[2] {
                        return Err(mismatch(format!("weight expects {} input channels, got {}", w[3], x[2])));
                    }
                    w[0]
                };
                check_bias(bias, out_c)?;
                let (oh, _) = padding
                    .output_dim(x[0], w[1], *stride)
                    .ok_or_else(|| mismatch(format!("kernel {}x{} larger than input {x:?}", w[1], w[2])))?;
                let (ow, _) = padding
                    .output_dim(x[1], w[2], *stride)
                    .ok_or_else(|| mismatch(format!("kernel {}x{} larger than input {x:?}", w[1], w[2])))?;
                Ok(vec![oh, ow, out_c])
            }
            Op::Dense { weight, bias, .. } => {
                let x = &ins[0];
                let w = tshape(weight);
                if x.len() != 1 {
                    return Err(mismatch(format!("dense expects a feature vector, got {x:?}")));
                }
                if w.len() != 2 || w[1] != x[0] {
                    return Err(mismatch(format!("weight {w:?} expects {} inputs, fed {}", w.get(1).copied().unwrap_or(0), x[0])));
                }
                check_bias(bias, w[0])?;
                Ok(vec![w[0]])
            }
            Op::BatchNorm { gamma, beta, mean, variance, epsilon } => {
                let x = &ins[0];
                let c = *x.last().unwrap_or(&0);
                for t in [gamma, beta, mean, variance] {
                    if tshape(t) != [c] {
                        return Err(mismatch(format!("{t} has shape {:?}, expected [{c}]", tshape(t))));
                    }
                }
                if !(*epsilon >= 0.0) {
                    return Err(bad(format!("epsilon {epsilon} must be >= 0")));
                }
                Ok(x.clone())
            }
            Op::ReLU | Op::ReLU6 => Ok(ins[0].clone()),
            Op::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(ins[0].clone())
            }
            Op::FakeQuant { state } => {
                if tshape(state) != [3] {
                    return Err(mismatch("fake-quant state must have 3 elements".into()));
                }
                Ok(ins[0].clone())
            }
            Op::Softmax => {
                if ins[0].len() != 1 {
                    return Err(mismatch(format!("softmax expects a vector, got {:?}", ins[0])));
                }
                Ok(ins[0].clone())
            }
            Op::GlobalAvgPool => {
                if ins[0].len() != 3 {
                    return Err(mismatch(format!("pooling expects rank 3, got {:?}", ins[0])));
                }
                Ok(vec![ins[0][2]])
            }
            Op::Add => {
                if ins[0] != ins[1] {
                    return Err(mismatch(format!("{:?} + {:?}", ins[0], ins[1])));
                }
                Ok(ins[0].clone())
            }
            Op::Concat => {
                let first = &ins[0];
                if first.len() != 3 || ins.iter().any(|s| s.len() != 3 || s[..2] != first[..2]) {
                    return Err(mismatch(format!("concat inputs {ins:?}")));
                }
                Ok(vec![first[0], first[1], ins.iter().map(|s| s[2]).sum()])
            }
        }
    }

    /// Parameter counts over node-referenced tensors. Tensors shared by
    /// several nodes are counted once.
    pub fn param_count(&self) -> ParamCount {
        let mut seen = BTreeSet::new();
        let mut count = ParamCount::default();
        for node in &self.nodes {
            for (name, role) in node.op.weight_refs() {
                if !seen.insert(name) {
                    continue;
                }
                let Some(t) = self.tensors.get(name) else { continue };
                let n = t.numel();
                count.total += n;
                match role {
                    ParamRole::Trainable => count.trainable += n,
                    ParamRole::NonTrainable => count.non_trainable += n,
                }
            }
        }
        count
    }

    /// Names of tensors whose role is trainable, in node order.
    pub fn trainable_tensors(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for node in &self.nodes {
            for (name, role) in node.op.weight_refs() {
                if role == ParamRole::Trainable && seen.insert(name) {
                    out.push(name.to_string());
                }
            }
        }
        out
    }

    /// Removes the given nodes, rewiring each removed node's consumers to its
    /// first input, and renumbers ids to positions.
    pub fn remove_nodes(&mut self, remove: &BTreeSet<NodeId>) {
        if remove.is_empty() {
            return;
        }
        // Resolve chains of removed nodes to a surviving ancestor.
        let mut forward: Vec<NodeId> = (0..self.nodes.len()).collect();
        for node in &self.nodes {
            if remove.contains(&node.id) {
                forward[node.id] = forward[node.inputs[0]];
            }
        }
        let mut new_index = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for node in &self.nodes {
            if !remove.contains(&node.id) {
                new_index[node.id] = next;
                next += 1;
            }
        }
        let old = std::mem::take(&mut self.nodes);
        for mut node in old {
            if remove.contains(&node.id) {
                continue;
            }
            node.inputs = node.inputs.iter().map(|&i| new_index[forward[i]]).collect();
            node.id = new_index[node.id];
            self.nodes.push(node);
        }
    }

    /// Drops tensors not referenced by any node.
    pub fn drop_unreferenced_tensors(&mut self) {
        let used: BTreeSet<String> = self
            .nodes
            .iter()
            .flat_map(|n| n.op.weight_refs().into_iter().map(|(t, _)| t.to_string()))
            .collect();
        self.tensors.retain(|name, _| used.contains(name));
    }

    /// Total bytes of all tensor payloads, without alignment padding.
    pub fn weight_payload_bytes(&self) -> usize {
        self.tensors.values().map(Tensor::byte_len).sum()
    }
}
