//! Graph builders for the supported classifier families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{FusedActivation, Graph, Node, NodeId, Op, Padding, Scope};
use super::tensor::Tensor;

pub const DEFAULT_BN_EPSILON: f32 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("a classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dense network needs at least one block")]
    NoBlocks,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Incremental graph construction with seeded weight initialization.
///
/// Conv and dense kernels use fan-in scaled uniform initialization, biases
/// start at zero and batch norms at the identity (`gamma = 1`, `beta = 0`,
/// moving mean 0, moving variance 1).
pub struct GraphBuilder {
    graph: Graph,
    shapes: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    pub scope: Scope,
    pub bn_epsilon: f32,
}

impl GraphBuilder {
    pub fn new(input_shape: [usize; 3], seed: u64) -> Self {
        let mut graph = Graph::new(input_shape);
        graph.nodes.push(Node {
            id: 0,
            name: "input".into(),
            op: Op::Input,
            inputs: vec![],
            scope: Scope::Backbone,
            out_quant: None,
        });
        GraphBuilder {
            graph,
            shapes: vec![input_shape.to_vec()],
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Scope::Backbone,
            bn_epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub const INPUT: NodeId = 0;

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn channels(&self, id: NodeId) -> usize {
        *self.shapes[id].last().unwrap()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.graph.tensors.get_mut(name).expect("tensor exists")
    }

    fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let name = name.into();
        assert!(
            self.graph.node_by_name(&name).is_none(),
            "duplicate node name {name}"
        );
        let id = self.graph.nodes.len();
        self.graph.nodes.push(Node {
            id,
            name,
            op,
            inputs,
            scope: self.scope,
            out_quant: None,
        });
        let node = &self.graph.nodes[id];
        let ins: Vec<Vec<usize>> = node.inputs.iter().map(|&i| self.shapes[i].clone()).collect();
        let shape = self
            .graph
            .node_shape(node, &ins)
            .unwrap_or_else(|e| panic!("builder produced an invalid node: {e}"));
        self.shapes.push(shape);
        id
    }

    fn add_tensor(&mut self, name: String, tensor: Tensor) -> String {
        assert!(!self.graph.tensors.contains_key(&name), "duplicate tensor {name}");
        self.graph.tensors.insert(name.clone(), tensor);
        name
    }

    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..=limit)).collect();
        Tensor::f32(shape, data)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> NodeId {
        let cin = self.channels(x);
        let w = self.uniform(vec![filters, kernel, kernel, cin], kernel * kernel * cin);
        let weight = self.add_tensor(format!("{name}/kernel"), w);
        let bias = bias.then(|| self.add_tensor(format!("{name}/bias"), Tensor::zeros(vec![filters])));
        self.push(
            name,
            Op::Conv2D { weight, bias, stride, padding, activation: FusedActivation::None },
            vec![x],
        )
    }

    pub fn depthwise(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> NodeId {
        let c = self.channels(x);
        let w = self.uniform(vec![1, kernel, kernel, c], kernel * kernel);
        let weight = self.add_tensor(format!("{name}/depthwise_kernel"), w);
        let bias = bias.then(|| self.add_tensor(format!("{name}/bias"), Tensor::zeros(vec![c])));
        self.push(
            name,
            Op::DepthwiseConv2D { weight, bias, stride, padding, activation: FusedActivation::None },
            vec![x],
        )
    }

    pub fn dense(&mut self, name: &str, x: NodeId, units: usize, l2: f32) -> NodeId {
        let fan_in = self.channels(x);
        let w = self.uniform(vec![units, fan_in], fan_in);
        let weight = self.add_tensor(format!("{name}/kernel"), w);
        let bias = Some(self.add_tensor(format!("{name}/bias"), Tensor::zeros(vec![units])));
        self.push(name, Op::Dense { weight, bias, activation: FusedActivation::None, l2 }, vec![x])
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        let gamma = self.add_tensor(format!("{name}/gamma"), Tensor::filled(vec![c], 1.0));
        let beta = self.add_tensor(format!("{name}/beta"), Tensor::zeros(vec![c]));
        let mean = self.add_tensor(format!("{name}/moving_mean"), Tensor::zeros(vec![c]));
        let variance = self.add_tensor(format!("{name}/moving_variance"), Tensor::filled(vec![c], 1.0));
        let epsilon = self.bn_epsilon;
        self.push(name, Op::BatchNorm { gamma, beta, mean, variance, epsilon }, vec![x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, Op::ReLU, vec![x])
    }

    pub fn relu6(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, Op::ReLU6, vec![x])
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f32) -> NodeId {
        self.push(name, Op::Dropout { rate }, vec![x])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, Op::GlobalAvgPool, vec![x])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Add, vec![a, b])
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        self.push(name, Op::Concat, xs.to_vec())
    }

    pub fn softmax(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, Op::Softmax, vec![x])
    }

    pub fn finish(mut self, class_names: Vec<String>) -> Graph {
        self.graph.class_names = class_names;
        self.graph
    }
}


fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

/// Rounds a channel count to a multiple of `divisor`, never dropping more than
/// 10% below the requested value.
pub fn make_divisible(value: f32, divisor: usize) -> usize {
    let d = divisor as f32;
    let mut v = (divisor).max(((value + d / 2.0) as usize) / divisor * divisor);
    if (v as f32) < 0.9 * value {
        v += divisor;
    }
    v
}

/// One group of inverted residual blocks: expansion factor, output channels,
/// repeat count and stride of the first repeat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

/// Classification head on top of a pooled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub units: [usize; 2],
    pub dropout: [f32; 2],
    pub l2: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { units: [512, 256], dropout: [0.4, 0.3], l2: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileNetV2Config {
    pub input_size: usize,
    pub width: f32,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub last_channels: usize,
    pub head: HeadConfig,
}

impl MobileNetV2Config {
    /// The reference width-1.0 network at 224x224 with the 512/256 head.
    pub fn standard(width: f32) -> Self {
        let b = |expansion, channels, repeats, stride| BlockSpec { expansion, channels, repeats, stride };
        MobileNetV2Config {
            input_size: 224,
            width,
            stem_channels: 32,
            blocks: vec![
                b(1, 16, 1, 1),
                b(6, 24, 2, 2),
                b(6, 32, 3, 2),
                b(6, 64, 4, 2),
                b(6, 96, 3, 1),
                b(6, 160, 3, 2),
                b(6, 320, 1, 1),
            ],
            last_channels: 1280,
            head: HeadConfig::default(),
        }
    }

    /// A narrow, shallow variant with the same topology for desk-scale runs.
    pub fn desk(input_size: usize) -> Self {
        let b = |expansion, channels, repeats, stride| BlockSpec { expansion, channels, repeats, stride };
        MobileNetV2Config {
            input_size,
            width: 1.0,
            stem_channels: 8,
            blocks: vec![b(1, 8, 1, 1), b(4, 16, 2, 2), b(4, 24, 2, 2)],
            last_channels: 64,
            head: HeadConfig { units: [32, 16], dropout: [0.4, 0.3], l2: 1e-3 },
        }
    }

    pub fn build(&self, num_classes: usize, seed: u64) -> Result<Graph, BuildError> {
        if num_classes < 2 {
            return Err(BuildError::TooFewClasses(num_classes));
        }
        if !(self.width > 0.0) || self.input_size == 0 {
            return Err(BuildError::Config(format!(
                "width {} and input size {} must be positive",
                self.width, self.input_size
            )));
        }
        let mut gb = GraphBuilder::new([self.input_size, self.input_size, 3], seed);
        let stem = make_divisible(self.stem_channels as f32 * self.width, 8);
        let mut x = gb.conv("Conv1", GraphBuilder::INPUT, stem, 3, 2, Padding::Same, false);
        x = gb.batchnorm("bn_Conv1", x);
        x = gb.relu6("Conv1_relu", x);

        let mut block_id = 0;
        for spec in &self.blocks {
            let out_c = make_divisible((spec.channels as f32 * self.width).trunc(), 8);
            for r in 0..spec.repeats {
                let stride = if r == 0 { spec.stride } else { 1 };
                x = inverted_residual(&mut gb, x, block_id, spec.expansion, out_c, stride);
                block_id += 1;
            }
        }

        let last = if self.width > 1.0 {
            make_divisible(self.last_channels as f32 * self.width, 8)
        } else {
            self.last_channels
        };
        x = gb.conv("Conv_1", x, last, 1, 1, Padding::Same, false);
        x = gb.batchnorm("Conv_1_bn", x);
        x = gb.relu6("out_relu", x);
        classifier_head(&mut gb, x, &self.head, num_classes);
        Ok(gb.finish(default_class_names(num_classes)))
    }
}

fn inverted_residual(
    gb: &mut GraphBuilder,
    x: NodeId,
    id: usize,
    expansion: usize,
    out_c: usize,
    stride: usize,
) -> NodeId {
    let in_c = gb.channels(x);
    let prefix = if id == 0 { "expanded_conv".to_string() } else { format!("block_{id}") };
    let mut h = x;
    if expansion != 1 {
        h = gb.conv(&format!("{prefix}_expand"), h, in_c * expansion, 1, 1, Padding::Same, false);
        h = gb.batchnorm(&format!("{prefix}_expand_BN"), h);
        h = gb.relu6(&format!("{prefix}_expand_relu"), h);
    }
    h = gb.depthwise(&format!("{prefix}_depthwise"), h, 3, stride, Padding::Same, false);
    h = gb.batchnorm(&format!("{prefix}_depthwise_BN"), h);
    h = gb.relu6(&format!("{prefix}_depthwise_relu"), h);
    h = gb.conv(&format!("{prefix}_project"), h, out_c, 1, 1, Padding::Same, false);
    h = gb.batchnorm(&format!("{prefix}_project_BN"), h);
    if stride == 1 && in_c == out_c {
        h = gb.add(&format!("{prefix}_add"), x, h);
    }
    h
}

/// Pooling followed by the two-tier regularized dense head and softmax.
fn classifier_head(gb: &mut GraphBuilder, features: NodeId, head: &HeadConfig, num_classes: usize) -> NodeId {
    gb.scope = Scope::Head;
    let mut x = gb.global_avg_pool("global_average_pooling", features);
    x = gb.batchnorm("head_bn_1", x);
    x = gb.dense("head_dense_1", x, head.units[0], head.l2);
    x = gb.relu("head_relu_1", x);
    x = gb.dropout("head_dropout_1", x, head.dropout[0]);
    x = gb.batchnorm("head_bn_2", x);
    x = gb.dense("head_dense_2", x, head.units[1], head.l2);
    x = gb.relu("head_relu_2", x);
    x = gb.dropout("head_dropout_2", x, head.dropout[1]);
    x = gb.dense("predictions", x, num_classes, 0.0);
    gb.softmax("softmax", x)
}

/// The reference MobileNetV2 classifier: 224x224x3 input, standard backbone
/// at `width`, and the 512/256 head.
pub fn build_mobilenetv2_classifier(num_classes: usize, width: f32) -> Result<Graph, BuildError> {
    MobileNetV2Config::standard(width).build(num_classes, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub input_size: usize,
    /// Layers per dense block.
    pub blocks: Vec<usize>,
    pub growth: usize,
    /// Channel reduction factor applied by transition layers.
    pub compression: f32,
}

impl DenseNetConfig {
    /// Four blocks, 101 weighted layers.
    pub fn teacher() -> Self {
        DenseNetConfig { input_size: 224, blocks: vec![6, 12, 18, 12], growth: 32, compression: 0.5 }
    }

    /// Three blocks, 32 weighted layers.
    pub fn student() -> Self {
        DenseNetConfig { input_size: 224, blocks: vec![4, 5, 5], growth: 12, compression: 0.5 }
    }

    pub fn desk_teacher(input_size: usize) -> Self {
        DenseNetConfig { input_size, blocks: vec![3, 3], growth: 12, compression: 0.5 }
    }

    pub fn desk_student(input_size: usize) -> Self {
        DenseNetConfig { input_size, blocks: vec![2, 2], growth: 8, compression: 0.5 }
    }

    pub fn preset(name: &str, input_size: usize) -> Option<Self> {
        match name {
            "teacher" => Some(DenseNetConfig { input_size, ..Self::teacher() }),
            "student" => Some(DenseNetConfig { input_size, ..Self::student() }),
            "desk-teacher" => Some(Self::desk_teacher(input_size)),
            "desk-student" => Some(Self::desk_student(input_size)),
            _ => None,
        }
    }

    pub fn build(&self, num_classes: usize, seed: u64) -> Result<Graph, BuildError> {
        if self.blocks.is_empty() {
            return Err(BuildError::NoBlocks);
        }
        if num_classes == 0 || self.growth == 0 || self.blocks.contains(&0) {
            return Err(BuildError::Config("classes, growth and block sizes must be positive".into()));
        }
        let mut gb = GraphBuilder::new([self.input_size, self.input_size, 3], seed);
        let mut x = gb.conv("conv0", GraphBuilder::INPUT, 2 * self.growth, 3, 1, Padding::Same, false);
        for (b, &layers) in self.blocks.iter().enumerate() {
            let mut features = vec![x];
            for l in 0..layers {
                let input = if features.len() == 1 {
                    features[0]
                } else {
                    gb.concat(&format!("block{b}/layer{l}/concat"), &features)
                };
                let mut h = gb.batchnorm(&format!("block{b}/layer{l}/bn"), input);
                h = gb.relu(&format!("block{b}/layer{l}/relu"), h);
                h = gb.conv(&format!("block{b}/layer{l}/conv"), h, self.growth, 3, 1, Padding::Same, false);
                features.push(h);
            }
            x = gb.concat(&format!("block{b}/out"), &features);
            if b + 1 < self.blocks.len() {
                let c = ((gb.channels(x) as f32 * self.compression) as usize).max(1);
                let mut t = gb.batchnorm(&format!("transition{b}/bn"), x);
                t = gb.relu(&format!("transition{b}/relu"), t);
                t = gb.conv(&format!("transition{b}/conv"), t, c, 1, 1, Padding::Same, false);
                // 2x2 stride-2 depthwise conv initialised to average pooling.
                t = gb.depthwise(&format!("transition{b}/pool"), t, 2, 2, Padding::Valid, false);
                let pool = gb.tensor_mut(&format!("transition{b}/pool/depthwise_kernel"));
                pool.as_f32_mut().unwrap().iter_mut().for_each(|w| *w = 0.25);
                x = t;
            }
        }
        x = gb.batchnorm("final/bn", x);
        x = gb.relu("final/relu", x);
        gb.scope = Scope::Head;
        x = gb.global_avg_pool("global_average_pooling", x);
        x = gb.dense("predictions", x, num_classes, 0.0);
        gb.softmax("softmax", x);
        Ok(gb.finish(default_class_names(num_classes)))
    }
}

pub fn build_densenet(blocks: &[usize], growth: usize, num_classes: usize, input_size: usize) -> Result<Graph, BuildError> {
    DenseNetConfig { input_size, blocks: blocks.to_vec(), growth, compression: 0.5 }.build(num_classes, 0)
}

/// An 8x8 classifier exercising every inference node kind: conv, batch norm,
/// ReLU6, depthwise conv, residual add, pooling, dense head with dropout.
pub fn tiny_classifier(num_classes: usize, seed: u64) -> Graph {
    let mut gb = GraphBuilder::new([8, 8, 3], seed);
    let mut x = gb.conv("conv", GraphBuilder::INPUT, 4, 3, 1, Padding::Same, true);
    x = gb.batchnorm("conv_bn", x);
    let skip = gb.relu6("conv_relu", x);
    let mut h = gb.depthwise("dw", skip, 3, 1, Padding::Same, false);
    h = gb.batchnorm("dw_bn", h);
    h = gb.relu6("dw_relu", h);
    h = gb.conv("project", h, 4, 1, 1, Padding::Same, false);
    h = gb.batchnorm("project_bn", h);
    x = gb.add("add", skip, h);
    gb.scope = Scope::Head;
    x = gb.global_avg_pool("gap", x);
    x = gb.batchnorm("head_bn", x);
    x = gb.dense("fc", x, 8, 1e-3);
    x = gb.relu("fc_relu", x);
    x = gb.dropout("fc_dropout", x, 0.3);
    x = gb.dense("logits", x, num_classes, 0.0);
    gb.softmax("softmax", x);
    gb.finish(default_class_names(num_classes))
}

/// A randomly shaped small classifier with non-trivial batch-norm statistics
/// and biases. Used as a fixture by equivalence tests and benchmarks.
pub fn random_classifier(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let size = [6, 8, 9, 10][rng.gen_range(0..4)];
    let in_c = rng.gen_range(1..=3);
    let num_classes = rng.gen_range(2..=5);
    let mut gb = GraphBuilder::new([size, size, in_c], seed);
    gb.bn_epsilon = [1e-3, 1e-5, 0.0][rng.gen_range(0..3)];

    let pad = |r: &mut ChaCha8Rng| if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let act = |gb: &mut GraphBuilder, r: &mut ChaCha8Rng, name: &str, x: NodeId| {
        if r.gen_bool(0.5) { gb.relu6(name, x) } else { gb.relu(name, x) }
    };

    let stem_c = rng.gen_range(3..=6);
    let stem_k = [1, 3][rng.gen_range(0..2)];
    let stem_pad = if stem_k == 1 { Padding::Valid } else { pad(&mut rng) };
    let mut x = gb.conv("stem", GraphBuilder::INPUT, stem_c, stem_k, rng.gen_range(1..=2), stem_pad, rng.gen_bool(0.5));
    x = gb.batchnorm("stem_bn", x);
    x = act(&mut gb, &mut rng, "stem_act", x);

    for b in 0..rng.gen_range(1..=2) {
        let c = gb.channels(x);
        if rng.gen_bool(0.6) {
            let mut h = gb.conv(&format!("b{b}_expand"), x, c * 2, 1, 1, Padding::Same, rng.gen_bool(0.3));
            h = gb.batchnorm(&format!("b{b}_expand_bn"), h);
            h = act(&mut gb, &mut rng, &format!("b{b}_expand_act"), h);
            h = gb.depthwise(&format!("b{b}_dw"), h, 3, 1, Padding::Same, rng.gen_bool(0.3));
            h = gb.batchnorm(&format!("b{b}_dw_bn"), h);
            h = act(&mut gb, &mut rng, &format!("b{b}_dw_act"), h);
            h = gb.conv(&format!("b{b}_project"), h, c, 1, 1, Padding::Same, false);
            h = gb.batchnorm(&format!("b{b}_project_bn"), h);
            x = gb.add(&format!("b{b}_add"), x, h);
        } else {
            let out_c = rng.gen_range(3..=8);
            let k = if gb.shape(x)[0] >= 3 { 3 } else { 1 };
            let p = if k == 1 { Padding::Same } else { pad(&mut rng) };
            x = gb.conv(&format!("b{b}_conv"), x, out_c, k, 1, p, true);
            x = gb.batchnorm(&format!("b{b}_bn"), x);
            x = act(&mut gb, &mut rng, &format!("b{b}_act"), x);
            if rng.gen_bool(0.3) {
                x = gb.dropout(&format!("b{b}_dropout"), x, 0.2);
            }
        }
    }

    gb.scope = Scope::Head;
    x = gb.global_avg_pool("gap", x);
    x = gb.batchnorm("head_bn_1", x);
    let hidden = rng.gen_range(4..=12);
    x = gb.dense("fc", x, hidden, 1e-3);
    x = gb.relu("fc_relu", x);
    x = gb.dropout("fc_dropout", x, 0.4);
    x = gb.batchnorm("head_bn_2", x);
    x = gb.dense("logits", x, num_classes, 0.0);
    gb.softmax("softmax", x);
    let mut g = gb.finish(default_class_names(num_classes));
    randomize_statistics(&mut g, &mut rng);
    g
}

/// Replaces identity batch-norm parameters and zero biases with random values.
pub fn randomize_statistics(g: &mut Graph, rng: &mut impl Rng) {
    let nodes = g.nodes.clone();
    for node in &nodes {
        match &node.op {
            Op::BatchNorm { gamma, beta, mean, variance, .. } => {
                for (name, lo, hi) in [(gamma, 0.5, 1.5), (beta, -0.5, 0.5), (mean, -0.5, 0.5), (variance, 0.5, 2.0)] {
                    let t = g.tensors.get_mut(name).unwrap().as_f32_mut().unwrap();
                    t.iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
                }
            }
            Op::Conv2D { bias: Some(b), .. } | Op::DepthwiseConv2D { bias: Some(b), .. } | Op::Dense { bias: Some(b), .. } => {
                let t = g.tensors.get_mut(b).unwrap().as_f32_mut().unwrap();
                t.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
            _ => {}
        }
    }
}
