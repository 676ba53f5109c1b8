use super::affine::{activation_params, symmetric_scale};
use super::{CalibrationStats, QuantError};
use crate::model::{Graph, Op, QuantParams, Tensor, TensorData};

/// Quantizes an optimized float graph to INT8.
///
/// Conv and dense weights become per-output-channel symmetric I8, biases I32
/// at scale `s_in * s_w`, and every activation edge except the softmax output
/// gets per-tensor affine parameters. Ranges recorded by quantization-aware
/// training take precedence over calibration statistics.
pub fn quantize_int8(graph: &Graph, stats: &CalibrationStats) -> Result<Graph, QuantError> {
    let mut g = graph.clone();
    for i in 0..g.nodes.len() {
        if matches!(g.nodes[i].op, Op::Softmax) {
            continue;
        }
        let name = &g.nodes[i].name;
        let [lo, hi] = g
            .recorded_ranges
            .get(name)
            .copied()
            .or_else(|| stats.range(name))
            .ok_or_else(|| QuantError::MissingStats(name.clone()))?;
        g.nodes[i].out_quant = Some(activation_params(lo, hi));
    }
    for i in 0..g.nodes.len() {
        let (weight, bias, axis) = match &g.nodes[i].op {
            Op::Conv2D { weight, bias, .. } | Op::Dense { weight, bias, .. } => (weight.clone(), bias.clone(), 0),
            Op::DepthwiseConv2D { weight, bias, .. } => (weight.clone(), bias.clone(), 3),
            _ => continue,
        };
        let s_in = g.nodes[g.nodes[i].inputs[0]].out_quant.as_ref().unwrap().scale();
        let scales = quantize_weight(&mut g, &weight, axis)?;
        if let Some(b) = bias {
            let t = g.tensors.get_mut(&b).unwrap();
            let v = t.as_f32().ok_or_else(|| QuantError::NotFloat(b.clone()))?;
            let bias_scales: Vec<f32> = scales.iter().map(|s| s_in * s).collect();
            let q = v
                .iter()
                .zip(&bias_scales)
                .map(|(&x, &s)| (x as f64 / s as f64).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                .collect();
            t.data = TensorData::I32(q);
            t.quant = Some(QuantParams::per_channel(bias_scales, 0));
        }
    }
    Ok(g)
}

/// Symmetric per-channel quantization of a weight tensor along `axis`.
/// Returns the channel scales.
fn quantize_weight(g: &mut Graph, name: &str, axis: usize) -> Result<Vec<f32>, QuantError> {
    let t: &mut Tensor = g.tensors.get_mut(name).unwrap();
    let v = t.as_f32().ok_or_else(|| QuantError::NotFloat(name.to_string()))?;
    let channels = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let channel = |i: usize| (i / inner) % channels;
    let mut max_abs = vec![0f32; channels];
    for (i, &x) in v.iter().enumerate() {
        let c = channel(i);
        max_abs[c] = max_abs[c].max(x.abs());
    }
    let scales: Vec<f32> = max_abs.iter().map(|&m| symmetric_scale(m)).collect();
    let q = v
        .iter()
        .enumerate()
        .map(|(i, &x)| super::affine::quantize_with(x, scales[channel(i)], 0))
        .collect();
    t.data = TensorData::I8(q);
    t.quant = Some(QuantParams::per_channel(scales.clone(), axis));
    Ok(scales)
}
