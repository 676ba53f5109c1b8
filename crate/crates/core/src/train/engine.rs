//! Training-mode forward pass with a tape, and reverse-mode gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fake_quant::{fake_quant, fake_quant_backward, FakeQuantState};
use super::grad::{self, BnCache};
use super::loss::{cross_entropy, kd_loss, KdConfig};
use super::TrainError;
use crate::model::{DType, FusedActivation, Graph, Node, Op, Scope, Tensor};
use crate::model::graph::ParamRole;
use crate::runtime::kernels::{self, Scalar};
use crate::runtime::session::shape4;
use crate::runtime::Activation;

pub const BN_MOMENTUM: f64 = 0.99;

/// A graph whose float tensors are held in precision `F` for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar> {
    pub graph: Graph,
    pub params: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn from_graph(graph: &Graph) -> Result<Self, TrainError> {
        graph.validate().map_err(TrainError::InvalidGraph)?;
        let mut params = BTreeMap::new();
        for (name, t) in &graph.tensors {
            if t.dtype() != DType::F32 {
                return Err(TrainError::NotFloat(name.clone()));
            }
            params.insert(name.clone(), t.to_f32_vec().into_iter().map(F::from_f32).collect());
        }
        Ok(Model { graph: graph.clone(), params })
    }

    /// The graph with current parameter values written back as F32.
    pub fn to_graph(&self) -> Graph {
        let mut g = self.graph.clone();
        for (name, v) in &self.params {
            let t = g.tensors.get_mut(name).expect("parameter belongs to graph");
            let data = v.iter().map(|&x| Scalar::to_f32(x)).collect();
            *t = Tensor { data: crate::model::TensorData::F32(data), ..t.clone() };
        }
        g
    }

    /// Tensors updated by the optimizer under `frozen_backbone`.
    pub fn trainable(&self, frozen_backbone: bool) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for node in &self.graph.nodes {
            if frozen_backbone && node.scope == Scope::Backbone {
                continue;
            }
            for (name, role) in node.op.weight_refs() {
                if role == ParamRole::Trainable && seen.insert(name) {
                    out.push(name.to_string());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Dropout active, batch statistics, fake-quant ranges updated.
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassConfig {
    pub phase: Phase,
    /// Backbone nodes run in inference mode and receive no gradient.
    pub frozen_backbone: bool,
}

impl PassConfig {
    pub fn train(frozen_backbone: bool) -> Self {
        PassConfig { phase: Phase::Train, frozen_backbone }
    }

    pub fn eval() -> Self {
        PassConfig { phase: Phase::Eval, frozen_backbone: false }
    }
}

enum Cache<F> {
    None,
    Bn(BnCache<F>),
    /// Dropout keep mask already scaled by `1 / (1 - rate)`.
    Mask(Vec<F>),
    Clip(f32, f32),
}

pub struct Tape<F: Scalar> {
    outputs: Vec<Option<Activation<F>>>,
    caches: Vec<Cache<F>>,
    needs_grad: Vec<bool>,
    frozen_backbone: bool,
    pub logits: Activation<F>,
}

fn node_frozen(node: &Node, cfg: &PassConfig) -> bool {
    cfg.frozen_backbone && node.scope == Scope::Backbone
}

/// Runs the graph. In the training phase every intermediate is kept for
/// [`backward`], batch-norm moving statistics and fake-quant ranges are
/// updated in place, and dropout masks are drawn from `rng`.
pub fn forward<F: Scalar>(
    model: &mut Model<F>,
    x: &Activation<F>,
    cfg: &PassConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tape<F>, TrainError> {
    let expected = model.graph.input_shape;
    if x.shape.len() != 4 || x.shape[1..] != expected {
        return Err(TrainError::InputShape { got: x.shape.clone(), expected });
    }
    let training = cfg.phase == Phase::Train;
    let nodes = model.graph.nodes.clone();
    let n = nodes.len();
    let mut uses: Vec<usize> = model.graph.consumers().iter().map(Vec::len).collect();
    let mut outputs: Vec<Option<Activation<F>>> = vec![None; n];
    let mut caches: Vec<Cache<F>> = (0..n).map(|_| Cache::None).collect();
    let mut needs_grad = vec![false; n];
    let mut logits = None;
    for node in &nodes {
        let frozen = node_frozen(node, cfg);
        let owns_params = !frozen && node.op.weight_refs().iter().any(|(_, r)| *r == ParamRole::Trainable);
        needs_grad[node.id] = training && (owns_params || node.inputs.iter().any(|&i| needs_grad[i]));
        let input = |k: usize| outputs[node.inputs[k]].as_ref().expect("producer evaluated");
        let p = &model.params;
        let shape = |name: &str| model.graph.tensors[name].shape.clone();
        let wrap = |source| TrainError::Kernel { node: node.name.clone(), source };
        let mut cache = Cache::None;
        let out = match &node.op {
            Op::Input => x.clone(),
            Op::Conv2D { weight, bias, stride, padding, activation } => kernels::conv2d(
                input(0),
                &p[weight],
                shape4(&shape(weight)),
                bias.as_ref().map(|b| p[b].as_slice()),
                *stride,
                *padding,
                *activation,
            )
            .map_err(wrap)?,
            Op::DepthwiseConv2D { weight, bias, stride, padding, activation } => kernels::depthwise_conv2d(
                input(0),
                &p[weight],
                shape4(&shape(weight)),
                bias.as_ref().map(|b| p[b].as_slice()),
                *stride,
                *padding,
                *activation,
            )
            .map_err(wrap)?,
            Op::Dense { weight, bias, activation, .. } => {
                let s = shape(weight);
                kernels::dense(input(0), &p[weight], [s[0], s[1]], bias.as_ref().map(|b| p[b].as_slice()), *activation)
                    .map_err(wrap)?
            }
            Op::BatchNorm { gamma, beta, mean, variance, epsilon } => {
                let eps = F::from_f32(*epsilon);
                if training && !frozen {
                    let (out, c, bm, bv) = grad::batchnorm_train(input(0), &p[gamma], &p[beta], eps);
                    cache = Cache::Bn(c);
                    let ema = |stat: &mut Vec<F>, batch: &[F]| {
                        for (s, &b) in stat.iter_mut().zip(batch) {
                            *s = F::narrow(BN_MOMENTUM * s.widen() + (1.0 - BN_MOMENTUM) * b.widen());
                        }
                    };
                    ema(model.params.get_mut(mean).unwrap(), &bm);
                    ema(model.params.get_mut(variance).unwrap(), &bv);
                    out
                } else {
                    let out = kernels::batchnorm_inference(input(0), &p[gamma], &p[beta], &p[mean], &p[variance], eps)
                        .map_err(wrap)?;
                    if needs_grad[node.id] {
                        let (mu, var) = (&p[mean], &p[variance]);
                        let c = mu.len();
                        let centered = input(0).data.iter().enumerate().map(|(i, &v)| v - mu[i % c]).collect();
                        let inv_std = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                        cache = Cache::Bn(BnCache { x_hat: None, inv_std, centered: Some(centered) });
                    }
                    out
                }
            }
            Op::ReLU => kernels::apply_activation(input(0), FusedActivation::Relu),
            Op::ReLU6 => kernels::apply_activation(input(0), FusedActivation::Relu6),
            Op::GlobalAvgPool => kernels::global_avg_pool(input(0)).map_err(wrap)?,
            Op::Add => kernels::residual_add(input(0), input(1)).map_err(wrap)?,
            Op::Concat => {
                let xs: Vec<&Activation<F>> = (0..node.inputs.len()).map(input).collect();
                kernels::concat_channels(&xs).map_err(wrap)?
            }
            Op::Dropout { rate } => {
                let x = input(0);
                if training && *rate > 0.0 {
                    let keep = F::from_f32(1.0 / (1.0 - rate));
                    let mask: Vec<F> = (0..x.data.len())
                        .map(|_| if rng.gen::<f32>() < *rate { F::zero() } else { keep })
                        .collect();
                    let out = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    cache = Cache::Mask(mask);
                    Activation::new(x.shape.clone(), out)
                } else {
                    x.clone()
                }
            }
            Op::FakeQuant { state } => {
                let x = input(0);
                let mut st = FakeQuantState::from_slice(&p[state]);
                if training {
                    let (lo, hi) = x.data.iter().fold((F::infinity(), F::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
                    st.observe(Scalar::to_f32(lo), Scalar::to_f32(hi));
                    st.write(model.params.get_mut(state).unwrap());
                }
                if st.initialized {
                    let (lo, hi) = st.clip_range();
                    cache = Cache::Clip(lo, hi);
                }
                Activation::new(x.shape.clone(), fake_quant(&x.data, &st))
            }
            Op::Softmax => {
                logits = Some(input(0).clone());
                kernels::softmax_t(input(0), F::one()).map_err(wrap)?
            }
        };
        caches[node.id] = cache;
        if !training {
            for &i in &node.inputs {
                uses[i] -= 1;
                if uses[i] == 0 {
                    outputs[i] = None;
                }
            }
        }
        outputs[node.id] = Some(out);
    }
    Ok(Tape {
        outputs,
        caches,
        needs_grad,
        frozen_backbone: cfg.frozen_backbone,
        logits: logits.expect("graph ends in softmax"),
    })
}

pub type Grads<F> = BTreeMap<String, Vec<F>>;

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, g: Vec<F>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
        None => *slot = Some(g),
    }
}

/// Gradients of the loss with respect to every parameter that is trainable
/// in the pass that produced `tape`, given the gradient at the logits.
pub fn backward<F: Scalar>(model: &Model<F>, tape: &Tape<F>, dlogits: &Activation<F>) -> Result<Grads<F>, TrainError> {
    let g = &model.graph;
    let n = g.nodes.len();
    let mut dout: Vec<Option<Vec<F>>> = vec![None; n];
    let softmax = g.output().expect("validated graph has an output");
    dout[softmax.inputs[0]] = Some(dlogits.data.clone());
    let mut grads = Grads::new();
    let trainable: BTreeSet<String> = model.trainable(tape.frozen_backbone).into_iter().collect();
    let mut put = |name: &str, v: Vec<F>| {
        if trainable.contains(name) {
            grads.insert(name.to_string(), v);
        }
    };
    for node in g.nodes.iter().rev() {
        if !tape.needs_grad[node.id] {
            continue;
        }
        let Some(mut dy) = dout[node.id].take() else { continue };
        let out = tape.outputs[node.id].as_ref().expect("training tape keeps outputs");
        let x = |k: usize| tape.outputs[node.inputs[k]].as_ref().expect("training tape keeps outputs");
        let need = |k: usize| tape.needs_grad[node.inputs[k]];
        let wrap = |source| TrainError::Kernel { node: node.name.clone(), source };
        let p = &model.params;
        let shape = |name: &str| g.tensors[name].shape.clone();
        let mut to_input: Vec<(usize, Vec<F>)> = Vec::new();
        match &node.op {
            Op::Input | Op::Softmax => {}
            Op::Conv2D { weight, bias, stride, padding, activation }
            | Op::DepthwiseConv2D { weight, bias, stride, padding, activation } => {
                grad::activation_backward(&mut dy, &out.data, *activation);
                let ws = shape4(&shape(weight));
                let r = if matches!(node.op, Op::Conv2D { .. }) {
                    grad::conv2d_backward(x(0), &p[weight], ws, &dy, *stride, *padding, need(0))
                } else {
                    grad::depthwise_backward(x(0), &p[weight], ws, &dy, *stride, *padding, need(0))
                }
                .map_err(wrap)?;
                put(weight, r.dw);
                if let Some(b) = bias {
                    put(b, r.db);
                }
                if let Some(dx) = r.dx {
                    to_input.push((0, dx));
                }
            }
            Op::Dense { weight, bias, activation, .. } => {
                grad::activation_backward(&mut dy, &out.data, *activation);
                let s = shape(weight);
                let r = grad::dense_backward(x(0), &p[weight], [s[0], s[1]], &dy, need(0));
                put(weight, r.dw);
                if let Some(b) = bias {
                    put(b, r.db);
                }
                if let Some(dx) = r.dx {
                    to_input.push((0, dx));
                }
            }
            Op::BatchNorm { gamma, beta, .. } => {
                let Cache::Bn(cache) = &tape.caches[node.id] else { unreachable!("batch norm cache") };
                let (dx, dg, db) = grad::batchnorm_backward(&dy, &p[gamma], cache, need(0));
                put(gamma, dg);
                put(beta, db);
                if let Some(dx) = dx {
                    to_input.push((0, dx));
                }
            }
            Op::ReLU => {
                grad::activation_backward(&mut dy, &out.data, FusedActivation::Relu);
                to_input.push((0, dy));
            }
            Op::ReLU6 => {
                grad::activation_backward(&mut dy, &out.data, FusedActivation::Relu6);
                to_input.push((0, dy));
            }
            Op::GlobalAvgPool => to_input.push((0, grad::global_avg_pool_backward(&dy, &x(0).shape))),
            Op::Add => {
                to_input.push((0, dy.clone()));
                to_input.push((1, dy));
            }
            Op::Concat => {
                let channels: Vec<usize> = (0..node.inputs.len()).map(|k| x(k).channels()).collect();
                for (k, part) in grad::concat_backward(&dy, &channels).into_iter().enumerate() {
                    to_input.push((k, part));
                }
            }
            Op::Dropout { .. } => {
                if let Cache::Mask(mask) = &tape.caches[node.id] {
                    dy.iter_mut().zip(mask).for_each(|(g, &m)| *g = *g * m);
                }
                to_input.push((0, dy));
            }
            Op::FakeQuant { .. } => {
                if let Cache::Clip(lo, hi) = tape.caches[node.id] {
                    fake_quant_backward(&mut dy, &x(0).data, (lo, hi));
                }
                to_input.push((0, dy));
            }
        }
        for (k, d) in to_input {
            let src = node.inputs[k];
            if tape.needs_grad[src] {
                accumulate(&mut dout[src], d);
            }
        }
    }
    Ok(grads)
}

/// `Σ λ‖W‖²` over dense kernels with a positive `l2`, adding `2λW` to the
/// gradients of those that are being trained.
pub fn l2_penalty<F: Scalar>(model: &Model<F>, grads: &mut Grads<F>) -> F {
    let mut total = F::zero();
    for node in &model.graph.nodes {
        let Op::Dense { weight, l2, .. } = &node.op else { continue };
        if *l2 <= 0.0 {
            continue;
        }
        let lambda = F::from_f32(*l2);
        let w = &model.params[weight];
        total = total + lambda * w.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b);
        if let Some(g) = grads.get_mut(weight) {
            let two = lambda + lambda;
            g.iter_mut().zip(w).for_each(|(g, &v)| *g = *g + two * v);
        }
    }
    total
}

pub enum Objective<'a, F: Scalar> {
    CrossEntropy,
    Distill { teacher_logits: &'a Activation<F>, cfg: KdConfig },
}

pub struct StepResult<F> {
    pub loss: F,
    pub grads: Grads<F>,
    pub logits: Activation<F>,
}

/// Forward, loss (including the L2 term) and backward for one batch.
pub fn forward_backward<F: Scalar>(
    model: &mut Model<F>,
    x: &Activation<F>,
    labels: &[usize],
    objective: &Objective<F>,
    cfg: &PassConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult<F>, TrainError> {
    let tape = forward(model, x, cfg, rng)?;
    let (loss, dlogits) = match objective {
        Objective::CrossEntropy => cross_entropy(&tape.logits, labels)?,
        Objective::Distill { teacher_logits, cfg } => kd_loss(&tape.logits, teacher_logits, labels, cfg)?,
    };
    let mut grads = if cfg.phase == Phase::Train { backward(model, &tape, &dlogits)? } else { Grads::new() };
    let l2 = l2_penalty(model, &mut grads);
    Ok(StepResult { loss: loss + l2, grads, logits: tape.logits })
}
