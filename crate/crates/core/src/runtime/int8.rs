//! Integer execution: I8 activations, I8 weights, I32 accumulation.
//!
//! Conv, depthwise and dense layers run fully in integers and requantize the
//! accumulator with a floating-point multiplier. Remaining node kinds
//! dequantize their inputs, apply the float kernel, and requantize to the
//! node's calibrated output parameters. Softmax runs in F32.

use super::kernels::{self, Activation, ConvGeometry, KernelError};
use super::par;
use super::session::{shape4, ExecError, Outputs};
use crate::model::{FusedActivation, Graph, Node, Op, QuantParams, TensorData};
use crate::quant::affine::{dequantize_with, quantize_with, QMAX, QMIN};

/// An I8 activation with per-tensor quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QActivation {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub qp: QuantParams,
}

impl QActivation {
    pub fn quantize(x: &Activation<f32>, qp: &QuantParams) -> Self {
        let (s, z) = (qp.scale(), qp.zero_point());
        QActivation {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&r| quantize_with(r, s, z)).collect(),
            qp: qp.clone(),
        }
    }

    pub fn dequantize(&self) -> Activation<f32> {
        let (s, z) = (self.qp.scale(), self.qp.zero_point());
        Activation::new(self.shape.clone(), self.data.iter().map(|&q| dequantize_with(q, s, z)).collect())
    }
}

/// Integer weights and requantization constants for one layer.
#[derive(Debug, Clone)]
struct QLayer {
    weights: Vec<i8>,
    w_shape: Vec<usize>,
    bias: Vec<i32>,
    /// `s_in * s_w[c] / s_out` per output channel.
    multipliers: Vec<f64>,
    out_zp: i32,
    /// Integer clamp implementing the fused activation.
    lo: i32,
    hi: i32,
}

impl QLayer {
    #[inline]
    fn requantize(&self, acc: i32, c: usize) -> i8 {
        let q = (acc as f64 * self.multipliers[c]).round() + self.out_zp as f64;
        (q.clamp(self.lo as f64, self.hi as f64)) as i8
    }
}

/// Per-node integer state prepared once per session.
pub(crate) struct Int8Plan {
    layers: Vec<Option<QLayer>>,
}

fn node_quant(node: &Node) -> Result<&QuantParams, ExecError> {
    node.out_quant
        .as_ref()
        .ok_or_else(|| ExecError::MissingCalibration(node.name.clone()))
}

fn mode_err(detail: String) -> ExecError {
    ExecError::ModeMismatch { mode: super::ExecutionMode::Int8, detail }
}

impl Int8Plan {
    pub(crate) fn new(graph: &Graph) -> Result<Self, ExecError> {
        let mut layers = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            if !matches!(node.op, Op::Softmax) {
                node_quant(node)?;
            }
            let (weight, bias, act, channel_axis) = match &node.op {
                Op::Conv2D { weight, bias, activation, .. } => (weight, bias, *activation, 0),
                Op::DepthwiseConv2D { weight, bias, activation, .. } => (weight, bias, *activation, 3),
                Op::Dense { weight, bias, activation, .. } => (weight, bias, *activation, 0),
                _ => {
                    layers.push(None);
                    continue;
                }
            };
            let in_qp = node_quant(&graph.nodes[node.inputs[0]])?;
            let out_qp = node_quant(node)?;
            let w = &graph.tensors[weight];
            let (TensorData::I8(wq), Some(wqp)) = (&w.data, &w.quant) else {
                return Err(mode_err(format!("{} weights are not I8", node.name)));
            };
            let out_c = w.shape[channel_axis];
            let w_scales: Vec<f32> = match wqp.axis {
                Some(a) if a == channel_axis => wqp.scales.clone(),
                None => vec![wqp.scale(); out_c],
                Some(a) => return Err(mode_err(format!("{weight} quantized along axis {a}"))),
            };
            if wqp.zero_points.iter().any(|&z| z != 0) {
                return Err(mode_err(format!("{weight} has non-zero weight zero points")));
            }
            let s_in = in_qp.scale() as f64;
            let bias_q = match bias.as_ref().map(|b| &graph.tensors[b]) {
                None => vec![0; out_c],
                Some(t) => match &t.data {
                    TensorData::I32(v) => v.clone(),
                    _ => t
                        .to_f32_vec()
                        .iter()
                        .zip(&w_scales)
                        .map(|(&b, &sw)| (b as f64 / (s_in * sw as f64)).round() as i32)
                        .collect(),
                },
            };
            let (s_out, zp) = (out_qp.scale() as f64, out_qp.zero_point());
            let multipliers = w_scales.iter().map(|&sw| s_in * sw as f64 / s_out).collect();
            let (lo, hi) = match act {
                FusedActivation::None => (QMIN, QMAX),
                FusedActivation::Relu => (zp.max(QMIN), QMAX),
                FusedActivation::Relu6 => {
                    (zp.max(QMIN), quantize_with(6.0, out_qp.scale(), zp) as i32)
                }
            };
            layers.push(Some(QLayer {
                weights: wq.clone(),
                w_shape: w.shape.clone(),
                bias: bias_q,
                multipliers,
                out_zp: zp,
                lo,
                hi,
            }));
        }
        Ok(Int8Plan { layers })
    }

    pub(crate) fn run(
        &self,
        graph: &Graph,
        uses: &[usize],
        batch: &Activation<f32>,
        observer: &mut dyn FnMut(&Node, &Activation<f32>),
    ) -> Result<Outputs, ExecError> {
        let mut values: Vec<Option<QActivation>> = vec![None; graph.nodes.len()];
        let mut remaining = uses.to_vec();
        let mut result = None;
        for node in &graph.nodes {
            let wrap = |source: KernelError| ExecError::Kernel { node: node.name.clone(), source };
            let input = |k: usize| values[node.inputs[k]].as_ref().expect("producer evaluated");
            let requant = |x: Activation<f32>| -> Result<QActivation, ExecError> {
                Ok(QActivation::quantize(&x, node_quant(node)?))
            };
            let out = match &node.op {
                Op::Input => requant(batch.clone())?,
                Op::Conv2D { stride, padding, .. } => {
                    let layer = self.layers[node.id].as_ref().unwrap();
                    conv2d_int8(input(0), layer, *stride, *padding, false, node_quant(node)?).map_err(wrap)?
                }
                Op::DepthwiseConv2D { stride, padding, .. } => {
                    let layer = self.layers[node.id].as_ref().unwrap();
                    conv2d_int8(input(0), layer, *stride, *padding, true, node_quant(node)?).map_err(wrap)?
                }
                Op::Dense { .. } => {
                    let layer = self.layers[node.id].as_ref().unwrap();
                    dense_int8(input(0), layer, node_quant(node)?).map_err(wrap)?
                }
                Op::Softmax => {
                    let logits = input(0).dequantize();
                    let probabilities = kernels::softmax_t(&logits, 1.0).map_err(wrap)?;
                    observer(node, &probabilities);
                    result = Some(Outputs { logits, probabilities });
                    continue;
                }
                Op::Dropout { .. } | Op::FakeQuant { .. } => {
                    let x = input(0).clone();
                    requant(x.dequantize())?
                }
                op => {
                    let x = input(0).dequantize();
                    let f = match op {
                        Op::BatchNorm { gamma, beta, mean, variance, epsilon } => {
                            let t = |n: &String| graph.tensors[n].to_f32_vec();
                            kernels::batchnorm_inference(&x, &t(gamma), &t(beta), &t(mean), &t(variance), *epsilon)
                                .map_err(wrap)?
                        }
                        Op::ReLU => kernels::apply_activation(&x, FusedActivation::Relu),
                        Op::ReLU6 => kernels::apply_activation(&x, FusedActivation::Relu6),
                        Op::GlobalAvgPool => kernels::global_avg_pool(&x).map_err(wrap)?,
                        Op::Add => kernels::residual_add(&x, &input(1).dequantize()).map_err(wrap)?,
                        Op::Concat => {
                            let xs: Vec<Activation<f32>> =
                                (0..node.inputs.len()).map(|k| input(k).dequantize()).collect();
                            let refs: Vec<&Activation<f32>> = xs.iter().collect();
                            kernels::concat_channels(&refs).map_err(wrap)?
                        }
                        _ => unreachable!("handled above"),
                    };
                    requant(f)?
                }
            };
            observer(node, &out.dequantize());
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    values[i] = None;
                }
            }
            values[node.id] = Some(out);
        }
        Ok(result.expect("graph ends in softmax"))
    }
}

fn conv2d_int8(
    x: &QActivation,
    layer: &QLayer,
    stride: usize,
    padding: crate::model::Padding,
    depthwise: bool,
    out_qp: &QuantParams,
) -> Result<QActivation, KernelError> {
    let [m, k_h, k_w, w_in] = shape4(&layer.w_shape);
    let g = ConvGeometry::new(&x.shape, k_h, k_w, stride, padding)?;
    let out_c = if depthwise { w_in } else { m };
    if w_in != g.in_c || (depthwise && m != 1) {
        return Err(KernelError::ChannelMismatch(format!(
            "weights {:?} for {} input channels",
            layer.w_shape, g.in_c
        )));
    }
    // Zero-point-centred input; padding contributes exactly zero.
    let zp = x.qp.zero_point();
    let xc: Vec<i32> = x.data.iter().map(|&q| q as i32 - zp).collect();
    let mut out = vec![0i8; g.batch * g.out_h * g.out_w * out_c];
    let mut acc = vec![0i32; out_c];
    let kernel_row = |row: usize, dst: &mut [i8], acc: &mut [i32]| {
        let (n, oy) = (row / g.out_h, row % g.out_h);
        for ox in 0..g.out_w {
            acc.copy_from_slice(&layer.bias);
            for ky in 0..k_h {
                let Some(iy) = g.input_y(oy, ky) else { continue };
                for kx in 0..k_w {
                    let Some(ix) = g.input_x(ox, kx) else { continue };
                    let base = ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
                    let xin = &xc[base..base + g.in_c];
                    if depthwise {
                        let wb = (ky * k_w + kx) * w_in;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += xin[c] * layer.weights[wb + c] as i32;
                        }
                    } else {
                        for (oc, a) in acc.iter_mut().enumerate() {
                            let wb = ((oc * k_h + ky) * k_w + kx) * w_in;
                            *a += idot(xin, &layer.weights[wb..wb + w_in]);
                        }
                    }
                }
            }
            for (c, &a) in acc.iter().enumerate() {
                dst[ox * out_c + c] = layer.requantize(a, c);
            }
        }
    };
    if par::parallel_enabled() {
        par::for_each_chunk(&mut out, g.out_w * out_c, |row, dst| {
            let mut acc = vec![0i32; out_c];
            kernel_row(row, dst, &mut acc);
        });
    } else {
        for (row, dst) in out.chunks_mut(g.out_w * out_c).enumerate() {
            kernel_row(row, dst, &mut acc);
        }
    }
    Ok(QActivation { shape: vec![g.batch, g.out_h, g.out_w, out_c], data: out, qp: out_qp.clone() })
}

fn dense_int8(x: &QActivation, layer: &QLayer, out_qp: &QuantParams) -> Result<QActivation, KernelError> {
    let (out_f, in_f) = (layer.w_shape[0], layer.w_shape[1]);
    if x.shape.len() != 2 || x.shape[1] != in_f {
        return Err(KernelError::ShapeMismatch(format!("dense expects [n, {in_f}], got {:?}", x.shape)));
    }
    let n = x.shape[0];
    let zp = x.qp.zero_point();
    let xc: Vec<i32> = x.data.iter().map(|&q| q as i32 - zp).collect();
    let mut out = vec![0i8; n * out_f];
    par::for_each_chunk(&mut out, out_f, |i, dst| {
        let xi = &xc[i * in_f..(i + 1) * in_f];
        for (o, d) in dst.iter_mut().enumerate() {
            let acc = layer.bias[o] + idot(xi, &layer.weights[o * in_f..(o + 1) * in_f]);
            *d = layer.requantize(acc, o);
        }
    });
    Ok(QActivation { shape: vec![n, out_f], data: out, qp: out_qp.clone() })
}

#[inline]
fn idot(x: &[i32], w: &[i8]) -> i32 {
    x.iter().zip(w).map(|(&a, &b)| a * b as i32).sum()
}
