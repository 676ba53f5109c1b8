//! Deployment-time graph rewrites: training-node stripping, batch-norm
//! folding and conv/dense + activation fusion.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::model::{Checkpoint, FusedActivation, Graph, NodeId, Op, Tensor};

/// Batch norms folded away and those left in place.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FoldReport {
    pub folded: Vec<String>,
    pub unfolded: Vec<String>,
}

/// Removes Dropout and FakeQuant nodes and every training-only tensor.
///
/// Fake-quant ranges are recorded in `recorded_ranges` under the name of the
/// node whose output they observed.
pub fn strip_training_nodes(ckpt: &Checkpoint) -> Graph {
    strip_graph(&ckpt.graph)
}

pub fn strip_graph(graph: &Graph) -> Graph {
    let mut g = graph.clone();
    let mut remove = BTreeSet::new();
    for node in &g.nodes {
        match &node.op {
            Op::Dropout { .. } => {
                remove.insert(node.id);
            }
            Op::FakeQuant { state } => {
                remove.insert(node.id);
                let s = g.tensors[state].to_f32_vec();
                if s[2] > 0.0 {
                    let producer = resolve(&g, node.inputs[0], &remove);
                    g.recorded_ranges.insert(g.nodes[producer].name.clone(), [s[0], s[1]]);
                }
            }
            _ => {}
        }
    }
    g.remove_nodes(&remove);
    g.drop_unreferenced_tensors();
    g.tensors.retain(|_, t| !t.training_only);
    g
}

/// Follows removed nodes back to the surviving producer.
fn resolve(g: &Graph, mut id: NodeId, removed: &BTreeSet<NodeId>) -> NodeId {
    while removed.contains(&id) {
        id = g.nodes[id].inputs[0];
    }
    id
}

fn reference_counts(g: &Graph) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for node in &g.nodes {
        for (t, _) in node.op.weight_refs() {
            *counts.entry(t.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

struct BnAffine {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

/// `y = scale * x + shift` form of an inference batch norm.
fn bn_affine(g: &Graph, op: &Op) -> Option<BnAffine> {
    let Op::BatchNorm { gamma, beta, mean, variance, epsilon } = op else { return None };
    let get = |n: &String| g.tensors[n].as_f32().map(|v| v.iter().map(|&x| x as f64).collect::<Vec<f64>>());
    let (gm, bt, mu, var) = (get(gamma)?, get(beta)?, get(mean)?, get(variance)?);
    let eps = *epsilon as f64;
    let scale: Vec<f64> = gm.iter().zip(&var).map(|(g, v)| g / (v + eps).sqrt()).collect();
    let shift = bt.iter().zip(&mu).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    Some(BnAffine { scale, shift })
}

fn f32_tensor_owned(g: &Graph, name: &str, refs: &BTreeMap<String, usize>) -> bool {
    refs.get(name) == Some(&1) && g.tensors.get(name).and_then(Tensor::as_f32).is_some()
}

fn fresh_name(g: &Graph, base: String) -> String {
    let mut name = base.clone();
    let mut i = 1;
    while g.tensors.contains_key(&name) {
        name = format!("{base}_{i}");
        i += 1;
    }
    name
}

/// Folds a batch norm into its conv/dense producer. Returns false when the
/// producer cannot absorb it.
fn fold_backward(g: &mut Graph, bn: NodeId, consumers: &[Vec<NodeId>], refs: &BTreeMap<String, usize>) -> bool {
    let p = g.nodes[bn].inputs[0];
    if consumers[p].len() != 1 {
        return false;
    }
    let (weight, bias) = match &g.nodes[p].op {
        Op::Conv2D { weight, bias, activation, .. }
        | Op::DepthwiseConv2D { weight, bias, activation, .. }
        | Op::Dense { weight, bias, activation, .. }
            if activation.is_none() =>
        {
            (weight.clone(), bias.clone())
        }
        _ => return false,
    };
    if !f32_tensor_owned(g, &weight, refs) || bias.as_ref().is_some_and(|b| !f32_tensor_owned(g, b, refs)) {
        return false;
    }
    let Some(aff) = bn_affine(g, &g.nodes[bn].op) else { return false };

    let shape = g.tensors[&weight].shape.clone();
    let channel_of: Box<dyn Fn(usize) -> usize> = match g.nodes[p].op {
        Op::DepthwiseConv2D { .. } => {
            let c = shape[3];
            Box::new(move |i| i % c)
        }
        _ => {
            let per = shape[1..].iter().product::<usize>();
            Box::new(move |i| i / per)
        }
    };
    let w = g.tensors.get_mut(&weight).unwrap().as_f32_mut().unwrap();
    for (i, v) in w.iter_mut().enumerate() {
        *v = (*v as f64 * aff.scale[channel_of(i)]) as f32;
    }
    let bias_name = match bias {
        Some(b) => b,
        None => {
            let name = fresh_name(g, format!("{}/bias", g.nodes[p].name));
            g.tensors.insert(name.clone(), Tensor::zeros(vec![aff.scale.len()]));
            match &mut g.nodes[p].op {
                Op::Conv2D { bias, .. } | Op::DepthwiseConv2D { bias, .. } | Op::Dense { bias, .. } => {
                    *bias = Some(name.clone())
                }
                _ => unreachable!(),
            }
            name
        }
    };
    let b = g.tensors.get_mut(&bias_name).unwrap().as_f32_mut().unwrap();
    for (c, v) in b.iter_mut().enumerate() {
        *v = (*v as f64 * aff.scale[c] + aff.shift[c]) as f32;
    }
    if let Some(r) = g.recorded_ranges.remove(&g.nodes[bn].name) {
        let producer = g.nodes[p].name.clone();
        g.recorded_ranges.insert(producer, r);
    }
    true
}

/// Folds a batch norm into the single Dense layer that consumes it.
fn fold_forward(g: &mut Graph, bn: NodeId, consumers: &[Vec<NodeId>], refs: &BTreeMap<String, usize>) -> bool {
    let [d] = consumers[bn][..] else { return false };
    let Op::Dense { weight, bias, .. } = &g.nodes[d].op else { return false };
    let (weight, bias) = (weight.clone(), bias.clone());
    if !f32_tensor_owned(g, &weight, refs) || bias.as_ref().is_some_and(|b| !f32_tensor_owned(g, b, refs)) {
        return false;
    }
    let Some(aff) = bn_affine(g, &g.nodes[bn].op) else { return false };
    let [out_f, in_f] = g.tensors[&weight].shape[..] else { return false };
    let w = g.tensors.get_mut(&weight).unwrap().as_f32_mut().unwrap();
    let mut extra = vec![0f64; out_f];
    for o in 0..out_f {
        for i in 0..in_f {
            let v = w[o * in_f + i] as f64;
            extra[o] += v * aff.shift[i];
            w[o * in_f + i] = (v * aff.scale[i]) as f32;
        }
    }
    let bias_name = match bias {
        Some(b) => b,
        None => {
            let name = fresh_name(g, format!("{}/bias", g.nodes[d].name));
            g.tensors.insert(name.clone(), Tensor::zeros(vec![out_f]));
            if let Op::Dense { bias, .. } = &mut g.nodes[d].op {
                *bias = Some(name.clone());
            }
            name
        }
    };
    let b = g.tensors.get_mut(&bias_name).unwrap().as_f32_mut().unwrap();
    for (o, v) in b.iter_mut().enumerate() {
        *v = (*v as f64 + extra[o]) as f32;
    }
    let name = g.nodes[bn].name.clone();
    g.recorded_ranges.remove(&name);
    true
}

/// Folds every foldable inference batch norm into an adjacent conv or dense
/// layer: backward into a single-consumer producer without a fused
/// activation, otherwise forward into a single Dense consumer.
pub fn fold_batchnorm(graph: &Graph) -> (Graph, FoldReport) {
    let mut g = graph.clone();
    let mut report = FoldReport::default();
    loop {
        let consumers = g.consumers();
        let refs = reference_counts(&g);
        let mut removed = BTreeSet::new();
        let mut touched = BTreeSet::new();
        for bn in 0..g.nodes.len() {
            if !matches!(g.nodes[bn].op, Op::BatchNorm { .. }) {
                continue;
            }
            // One rewrite per neighbour per pass keeps consumer lists valid.
            let p = g.nodes[bn].inputs[0];
            let next = consumers[bn].first().copied();
            if touched.contains(&p) || next.is_some_and(|n| touched.contains(&n)) {
                continue;
            }
            if fold_backward(&mut g, bn, &consumers, &refs) {
                touched.insert(p);
            } else if fold_forward(&mut g, bn, &consumers, &refs) {
                touched.insert(next.unwrap());
            } else {
                continue;
            }
            touched.insert(bn);
            removed.insert(bn);
            report.folded.push(g.nodes[bn].name.clone());
        }
        if removed.is_empty() {
            break;
        }
        g.remove_nodes(&removed);
    }
    g.drop_unreferenced_tensors();
    report.unfolded = g
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Op::BatchNorm { .. }))
        .map(|n| n.name.clone())
        .collect();
    (g, report)
}

/// Absorbs ReLU/ReLU6 nodes into their conv or dense producer when the
/// producer feeds nothing else.
pub fn fuse_conv_activation(graph: &Graph) -> Graph {
    let mut g = graph.clone();
    let consumers = g.consumers();
    let mut removed = BTreeSet::new();
    for a in 0..g.nodes.len() {
        let act = match g.nodes[a].op {
            Op::ReLU => FusedActivation::Relu,
            Op::ReLU6 => FusedActivation::Relu6,
            _ => continue,
        };
        let p = g.nodes[a].inputs[0];
        if consumers[p].len() != 1 {
            continue;
        }
        match &mut g.nodes[p].op {
            Op::Conv2D { activation, .. } | Op::DepthwiseConv2D { activation, .. } | Op::Dense { activation, .. }
                if activation.is_none() =>
            {
                *activation = act;
            }
            _ => continue,
        }
        removed.insert(a);
        let act_name = g.nodes[a].name.clone();
        let producer = g.nodes[p].name.clone();
        g.recorded_ranges.remove(&producer);
        if let Some(r) = g.recorded_ranges.remove(&act_name) {
            g.recorded_ranges.insert(producer, r);
        }
    }
    g.remove_nodes(&removed);
    g
}

/// Strip, fold, fuse: the full deployment conversion.
pub fn optimize(ckpt: &Checkpoint) -> Graph {
    optimize_graph(&ckpt.graph)
}

pub fn optimize_graph(graph: &Graph) -> Graph {
    let stripped = strip_graph(graph);
    let (folded, _) = fold_batchnorm(&stripped);
    fuse_conv_activation(&folded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builders::{random_classifier, tiny_classifier};
    use crate::model::{GraphBuilder, Padding, Scope};

    fn conv_bn() -> Graph {
        let mut gb = GraphBuilder::new([2, 2, 1], 0);
        gb.bn_epsilon = 0.0;
        let c = gb.conv("conv", GraphBuilder::INPUT, 1, 1, 1, Padding::Same, false);
        let bn = gb.batchnorm("bn", c);
        gb.scope = Scope::Head;
        let p = gb.global_avg_pool("gap", bn);
        let d = gb.dense("fc", p, 2, 0.0);
        gb.softmax("softmax", d);
        let mut g = gb.finish(vec!["a".into(), "b".into()]);
        g.tensors.get_mut("conv/kernel").unwrap().as_f32_mut().unwrap()[0] = 1.0;
        g.tensors.get_mut("bn/gamma").unwrap().as_f32_mut().unwrap()[0] = 2.0;
        g.tensors.get_mut("bn/beta").unwrap().as_f32_mut().unwrap()[0] = 3.0;
        g
    }

    #[test]
    fn conv_bn_substitution() {
        let (g, report) = fold_batchnorm(&conv_bn());
        assert_eq!(report.folded, vec!["bn"]);
        assert!(report.unfolded.is_empty());
        assert_eq!(g.tensors["conv/kernel"].as_f32().unwrap(), &[2.0]);
        assert_eq!(g.tensors["conv/bias"].as_f32().unwrap(), &[3.0]);
        g.validate().unwrap();
    }

    #[test]
    fn identity_bn_leaves_weights() {
        let mut g = conv_bn();
        g.tensors.get_mut("bn/gamma").unwrap().as_f32_mut().unwrap()[0] = 1.0;
        g.tensors.get_mut("bn/beta").unwrap().as_f32_mut().unwrap()[0] = 0.0;
        let before = g.tensors["conv/kernel"].clone();
        let (folded, _) = fold_batchnorm(&g);
        assert_eq!(folded.tensors["conv/kernel"], before);
    }

    #[test]
    fn optimize_removes_bn_and_dropout() {
        for seed in 0..20 {
            let g = optimize_graph(&random_classifier(seed));
            g.validate().unwrap();
            assert_eq!(g.count_kind("BatchNorm"), 0, "seed {seed}");
            assert_eq!(g.count_kind("Dropout"), 0);
            assert_eq!(optimize_graph(&g), g, "idempotent");
        }
    }

    #[test]
    fn fusion_merges_conv_relu6() {
        let g = optimize_graph(&tiny_classifier(4, 0));
        assert_eq!(g.count_kind("ReLU6"), 0);
        let conv = g.node_by_name("conv").unwrap();
        assert_eq!(conv.op.fused_activation(), Some(FusedActivation::Relu6));
    }

    #[test]
    fn shared_producer_is_not_fused() {
        let mut gb = GraphBuilder::new([4, 4, 2], 0);
        let c = gb.conv("conv", GraphBuilder::INPUT, 2, 1, 1, Padding::Same, true);
        let r = gb.relu("relu", c);
        let s = gb.add("add", c, r);
        let p = gb.global_avg_pool("gap", s);
        let d = gb.dense("fc", p, 2, 0.0);
        gb.softmax("softmax", d);
        let g = gb.finish(vec!["a".into(), "b".into()]);
        assert_eq!(fuse_conv_activation(&g), g);
    }
}
