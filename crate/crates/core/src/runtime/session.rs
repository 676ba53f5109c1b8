use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::int8::Int8Plan;
use super::kernels::{self, Activation, KernelError};
use crate::model::{DType, FusedActivation, Graph, Node, Op, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    Fp32,
    /// Weights stored as F16, widened to F32 once when the session is built.
    Fp16Weights,
    Int8,
}

impl ExecutionMode {
    /// The mode implied by the tensor dtypes of a graph.
    pub fn detect(graph: &Graph) -> ExecutionMode {
        let dtypes: Vec<DType> = graph.tensors.values().map(|t| t.dtype()).collect();
        if dtypes.contains(&DType::I8) {
            ExecutionMode::Int8
        } else if dtypes.contains(&DType::F16) {
            ExecutionMode::Fp16Weights
        } else {
            ExecutionMode::Fp32
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
    #[error("input batch has shape {got:?}, expected [n, {}, {}, {}]", .expected[0], .expected[1], .expected[2])]
    InputShape { got: Vec<usize>, expected: [usize; 3] },
    #[error("graph dtypes do not match {mode:?} execution: {detail}")]
    ModeMismatch { mode: ExecutionMode, detail: String },
    #[error("activation {0:?} has no calibrated quantization parameters")]
    MissingCalibration(String),
    #[error("{node}: {source}")]
    Kernel { node: String, source: KernelError },
}

/// Network output for a batch: pre-softmax logits and class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub logits: Activation<f32>,
    pub probabilities: Activation<f32>,
}

/// A graph prepared for repeated inference in one execution mode.
pub struct Session<'g> {
    graph: &'g Graph,
    mode: ExecutionMode,
    weights: BTreeMap<String, Vec<f32>>,
    int8: Option<Int8Plan>,
    uses: Vec<usize>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph, mode: ExecutionMode) -> Result<Self, ExecError> {
        graph.validate().map_err(ExecError::InvalidGraph)?;
        check_mode(graph, mode)?;
        let mut weights = BTreeMap::new();
        let mut int8 = None;
        match mode {
            ExecutionMode::Fp32 | ExecutionMode::Fp16Weights => {
                for (name, t) in &graph.tensors {
                    weights.insert(name.clone(), t.to_f32_vec());
                }
            }
            ExecutionMode::Int8 => int8 = Some(Int8Plan::new(graph)?),
        }
        let uses = graph.consumers().iter().map(Vec::len).collect();
        Ok(Session { graph, mode, weights, int8, uses })
    }

    /// A session in the mode implied by the graph's dtypes.
    pub fn auto(graph: &'g Graph) -> Result<Self, ExecError> {
        Session::new(graph, ExecutionMode::detect(graph))
    }

    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn run(&self, batch: &Activation<f32>) -> Result<Outputs, ExecError> {
        self.run_observed(batch, &mut |_, _| {})
    }

    /// Runs the batch, handing every node's float output to `observer`.
    /// INT8 sessions report dequantized activations.
    pub fn run_observed(
        &self,
        batch: &Activation<f32>,
        observer: &mut dyn FnMut(&Node, &Activation<f32>),
    ) -> Result<Outputs, ExecError> {
        let expected = self.graph.input_shape;
        if batch.shape.len() != 4 || batch.shape[1..] != expected {
            return Err(ExecError::InputShape { got: batch.shape.clone(), expected });
        }
        if let Some(plan) = &self.int8 {
            return plan.run(self.graph, &self.uses, batch, observer);
        }
        let mut values: Vec<Option<Activation<f32>>> = vec![None; self.graph.nodes.len()];
        let mut remaining = self.uses.clone();
        let mut logits = None;
        for node in &self.graph.nodes {
            let out = {
                let input = |k: usize| values[node.inputs[k]].as_ref().expect("producer evaluated");
                let w = |name: &str| self.weights[name].as_slice();
                let shape = |name: &str| self.graph.tensors[name].shape.as_slice();
                let wrap = |source| ExecError::Kernel { node: node.name.clone(), source };
                match &node.op {
                    Op::Input => batch.clone(),
                    Op::Conv2D { weight, bias, stride, padding, activation } => kernels::conv2d(
                        input(0),
                        w(weight),
                        shape4(shape(weight)),
                        bias.as_deref().map(w),
                        *stride,
                        *padding,
                        *activation,
                    )
                    .map_err(wrap)?,
                    Op::DepthwiseConv2D { weight, bias, stride, padding, activation } => kernels::depthwise_conv2d(
                        input(0),
                        w(weight),
                        shape4(shape(weight)),
                        bias.as_deref().map(w),
                        *stride,
                        *padding,
                        *activation,
                    )
                    .map_err(wrap)?,
                    Op::Dense { weight, bias, activation, .. } => {
                        let s = shape(weight);
                        kernels::dense(input(0), w(weight), [s[0], s[1]], bias.as_deref().map(w), *activation)
                            .map_err(wrap)?
                    }
                    Op::BatchNorm { gamma, beta, mean, variance, epsilon } => {
                        kernels::batchnorm_inference(input(0), w(gamma), w(beta), w(mean), w(variance), *epsilon)
                            .map_err(wrap)?
                    }
                    Op::ReLU => kernels::apply_activation(input(0), FusedActivation::Relu),
                    Op::ReLU6 => kernels::apply_activation(input(0), FusedActivation::Relu6),
                    Op::GlobalAvgPool => kernels::global_avg_pool(input(0)).map_err(wrap)?,
                    Op::Add => kernels::residual_add(input(0), input(1)).map_err(wrap)?,
                    Op::Concat => {
                        let xs: Vec<&Activation<f32>> = (0..node.inputs.len()).map(input).collect();
                        kernels::concat_channels(&xs).map_err(wrap)?
                    }
                    // Training-only nodes are identities at inference.
                    Op::Dropout { .. } | Op::FakeQuant { .. } => input(0).clone(),
                    Op::Softmax => {
                        logits = Some(input(0).clone());
                        kernels::softmax_t(input(0), 1.0).map_err(wrap)?
                    }
                }
            };
            observer(node, &out);
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    values[i] = None;
                }
            }
            values[node.id] = Some(out);
        }
        let probabilities = values.pop().flatten().expect("output node evaluated");
        Ok(Outputs { logits: logits.expect("graph ends in softmax"), probabilities })
    }
}

pub(crate) fn shape4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

fn check_mode(graph: &Graph, mode: ExecutionMode) -> Result<(), ExecError> {
    let mismatch = |detail: String| Err(ExecError::ModeMismatch { mode, detail });
    let find = |dt: DType| graph.tensors.iter().find(|(_, t)| t.dtype() == dt).map(|(n, _)| n.clone());
    match mode {
        ExecutionMode::Fp32 => {
            if let Some((name, t)) = graph.tensors.iter().find(|(_, t)| t.dtype() != DType::F32) {
                return mismatch(format!("tensor {name:?} is {:?}", t.dtype()));
            }
        }
        ExecutionMode::Fp16Weights => {
            if let Some(name) = find(DType::I8).or_else(|| find(DType::I32)) {
                return mismatch(format!("tensor {name:?} is integer"));
            }
            if find(DType::F16).is_none() {
                return mismatch("no F16 weights present".into());
            }
        }
        ExecutionMode::Int8 => {
            for node in &graph.nodes {
                if let Op::Conv2D { weight, .. } | Op::DepthwiseConv2D { weight, .. } | Op::Dense { weight, .. } = &node.op {
                    if graph.tensors[weight].dtype() != DType::I8 {
                        return mismatch(format!("{} weights are not I8", node.name));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Class probabilities for a batch, in the mode implied by the graph.
pub fn execute(graph: &Graph, batch: &Activation<f32>) -> Result<Activation<f32>, ExecError> {
    Ok(Session::auto(graph)?.run(batch)?.probabilities)
}

pub fn execute_with_mode(graph: &Graph, mode: ExecutionMode, batch: &Activation<f32>) -> Result<Outputs, ExecError> {
    Session::new(graph, mode)?.run(batch)
}

/// INT8 inference; the graph must carry I8 weights and calibrated activations.
pub fn execute_int8(graph: &Graph, batch: &Activation<f32>) -> Result<Activation<f32>, ExecError> {
    Ok(Session::new(graph, ExecutionMode::Int8)?.run(batch)?.probabilities)
}
