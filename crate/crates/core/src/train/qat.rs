use crate::model::{Graph, Node, NodeId, Op, Tensor};

fn conv_like(op: &Op) -> bool {
    matches!(op, Op::Conv2D { .. } | Op::DepthwiseConv2D { .. } | Op::Dense { .. })
}

/// Inserts a FakeQuant node after every activation edge that survives graph
/// optimization, so trained ranges land on the nodes INT8 conversion
/// quantizes. Outputs that will be folded or fused away (a conv feeding only
/// a batch norm or activation, a foldable batch norm feeding only an
/// activation) are left alone, as are softmax, dropout and existing
/// fake-quant nodes.
pub fn insert_fake_quant(graph: &Graph) -> Graph {
    let consumers = graph.consumers();
    let only = |id: NodeId| -> Option<&Op> {
        match consumers[id].as_slice() {
            [c] => Some(&graph.nodes[*c].op),
            _ => None,
        }
    };
    let is_act = |op: Option<&Op>| matches!(op, Some(Op::ReLU | Op::ReLU6));
    let wants = |node: &Node| -> bool {
        if matches!(node.op, Op::Softmax | Op::Dropout { .. } | Op::FakeQuant { .. }) {
            return false;
        }
        if matches!(only(node.id), Some(Op::FakeQuant { .. })) {
            return false;
        }
        if conv_like(&node.op) && (is_act(only(node.id)) || matches!(only(node.id), Some(Op::BatchNorm { .. }))) {
            return false;
        }
        if matches!(node.op, Op::BatchNorm { .. }) && is_act(only(node.id)) {
            let producer = &graph.nodes[node.inputs[0]];
            if conv_like(&producer.op) && consumers[producer.id].len() == 1 {
                return false;
            }
        }
        true
    };

    let mut g = graph.clone();
    g.nodes.clear();
    // Position in the new graph that downstream nodes read for each old id.
    let mut remap = vec![0usize; graph.nodes.len()];
    for node in &graph.nodes {
        let mut n = node.clone();
        n.id = g.nodes.len();
        n.inputs = node.inputs.iter().map(|&i| remap[i]).collect();
        remap[node.id] = n.id;
        g.nodes.push(n);
        if wants(node) {
            let name = format!("{}/fake_quant", node.name);
            let state = format!("{name}/state");
            g.tensors.insert(state.clone(), Tensor::zeros(vec![3]).training_only());
            let id = g.nodes.len();
            g.nodes.push(Node {
                id,
                name,
                op: Op::FakeQuant { state },
                inputs: vec![remap[node.id]],
                scope: node.scope,
                out_quant: None,
            });
            remap[node.id] = id;
        }
    }
    g
}
