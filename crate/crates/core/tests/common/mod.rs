#![allow(dead_code)]

use std::collections::BTreeMap;

use edgeq::model::{FusedActivation, Graph, Op, Padding};
use edgeq::runtime::Activation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_batch(shape: [usize; 3], n: usize, seed: u64) -> Activation<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = shape;
    Activation::new(
        vec![n, h, w, c],
        (0..n * h * w * c).map(|_| rng.gen::<f32>()).collect(),
    )
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn act(v: f64, a: FusedActivation) -> f64 {
    match a {
        FusedActivation::None => v,
        FusedActivation::Relu => v.max(0.0),
        FusedActivation::Relu6 => v.clamp(0.0, 6.0),
    }
}

/// Leading pad and output size, written out from the padding definitions.
fn pads(input: usize, k: usize, s: usize, p: Padding) -> (usize, usize) {
    match p {
        Padding::Valid => ((input - k) / s + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// Naive nested-loop conv over a single sample `[h][w][c]` in f64.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    wt: &[f64],
    [o, kh, kw, i]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: Padding,
    depthwise: bool,
) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, pt) = pads(h, kh, stride, pad);
    let (ow, pl) = pads(w, kw, stride, pad);
    let oc = if depthwise { c } else { o };
    let mut out = vec![0.0; oh * ow * oc];
    for y in 0..oh {
        for xx in 0..ow {
            for f in 0..oc {
                let mut s = bias.map_or(0.0, |b| b[f]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (y * stride + ky) as isize - pt as isize;
                        let ix = (xx * stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let px = (iy as usize * w + ix as usize) * c;
                        if depthwise {
                            s += x[px + f] * wt[(ky * kw + kx) * c + f];
                        } else {
                            for ci in 0..i {
                                s += x[px + ci] * wt[((f * kh + ky) * kw + kx) * i + ci];
                            }
                        }
                    }
                }
                out[(y * ow + xx) * oc + f] = s;
            }
        }
    }
    (out, (oh, ow, oc))
}

/// Straight-line f64 evaluation of one sample; returns the pre-softmax logits.
pub fn reference_logits(g: &Graph, sample: &[f32]) -> Vec<f64> {
    let t: BTreeMap<&str, Vec<f64>> = g
        .tensors
        .iter()
        .map(|(k, v)| {
            (
                k.as_str(),
                v.to_f32_vec().into_iter().map(f64::from).collect(),
            )
        })
        .collect();
    let mut vals: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    let mut logits = Vec::new();
    for node in &g.nodes {
        let inp = |k: usize| &vals[node.inputs[k]];
        let out: (Vec<f64>, Vec<usize>) = match &node.op {
            Op::Input => (
                sample.iter().map(|&v| v as f64).collect(),
                g.input_shape.to_vec(),
            ),
            Op::Conv2D {
                weight,
                bias,
                stride,
                padding,
                activation,
            }
            | Op::DepthwiseConv2D {
                weight,
                bias,
                stride,
                padding,
                activation,
            } => {
                let (x, s) = inp(0);
                let ws = &g.tensors[weight].shape;
                let (mut y, (oh, ow, oc)) = naive_conv(
                    x,
                    (s[0], s[1], s[2]),
                    &t[weight.as_str()],
                    [ws[0], ws[1], ws[2], ws[3]],
                    bias.as_ref().map(|b| t[b.as_str()].as_slice()),
                    *stride,
                    *padding,
                    matches!(node.op, Op::DepthwiseConv2D { .. }),
                );
                y.iter_mut().for_each(|v| *v = act(*v, *activation));
                (y, vec![oh, ow, oc])
            }
            Op::Dense {
                weight,
                bias,
                activation,
                ..
            } => {
                let (x, _) = inp(0);
                let ws = &g.tensors[weight].shape;
                let w = &t[weight.as_str()];
                let y = (0..ws[0])
                    .map(|o| {
                        let mut s = bias.as_ref().map_or(0.0, |b| t[b.as_str()][o]);
                        for i in 0..ws[1] {
                            s += x[i] * w[o * ws[1] + i];
                        }
                        act(s, *activation)
                    })
                    .collect();
                (y, vec![ws[0]])
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                variance,
                epsilon,
            } => {
                let (x, s) = inp(0);
                let c = *s.last().unwrap();
                let y = x
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let ch = k % c;
                        t[gamma.as_str()][ch] * (v - t[mean.as_str()][ch])
                            / (t[variance.as_str()][ch] + *epsilon as f64).sqrt()
                            + t[beta.as_str()][ch]
                    })
                    .collect();
                (y, s.clone())
            }
            Op::ReLU => (
                inp(0).0.iter().map(|&v| v.max(0.0)).collect(),
                inp(0).1.clone(),
            ),
            Op::ReLU6 => (
                inp(0).0.iter().map(|&v| v.clamp(0.0, 6.0)).collect(),
                inp(0).1.clone(),
            ),
            Op::Dropout { .. } | Op::FakeQuant { .. } => inp(0).clone(),
            Op::GlobalAvgPool => {
                let (x, s) = inp(0);
                let c = s[2];
                let hw = s[0] * s[1];
                let y = (0..c)
                    .map(|ch| (0..hw).map(|p| x[p * c + ch]).sum::<f64>() / hw as f64)
                    .collect();
                (y, vec![c])
            }
            Op::Add => (
                inp(0).0.iter().zip(&inp(1).0).map(|(a, b)| a + b).collect(),
                inp(0).1.clone(),
            ),
            Op::Concat => {
                let s0 = inp(0).1.clone();
                let pixels = s0[0] * s0[1];
                let mut y = Vec::new();
                let mut total = 0;
                for p in 0..pixels {
                    total = 0;
                    for k in 0..node.inputs.len() {
                        let (x, s) = inp(k);
                        y.extend_from_slice(&x[p * s[2]..(p + 1) * s[2]]);
                        total += s[2];
                    }
                }
                (y, vec![s0[0], s0[1], total])
            }
            Op::Softmax => {
                logits = inp(0).0.clone();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (e.iter().map(|v| v / z).collect(), inp(0).1.clone())
            }
        };
        vals.push(out);
    }
    logits
}

pub mod gradcheck {
    use edgeq::model::Graph;
    use edgeq::runtime::Activation;
    use edgeq::train::{forward_backward, KdConfig, Model, Objective, PassConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-4;

    pub struct Setup {
        pub x: Activation<f64>,
        pub labels: Vec<usize>,
        pub teacher: Activation<f64>,
        pub kd: Option<KdConfig>,
        pub frozen_backbone: bool,
    }

    impl Setup {
        pub fn new(g: &Graph, n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let [h, w, c] = g.input_shape;
            let k = g.num_classes();
            Setup {
                x: Activation::new(vec![n, h, w, c], (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                labels: (0..n).map(|_| rng.gen_range(0..k)).collect(),
                teacher: Activation::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect()),
                kd: None,
                frozen_backbone: false,
            }
        }

        fn loss_and_grads(&self, m: &Model<f64>) -> (f64, edgeq::train::engine::Grads<f64>) {
            let mut m = m.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let obj = match self.kd {
                Some(cfg) => Objective::Distill { teacher_logits: &self.teacher, cfg },
                None => Objective::CrossEntropy,
            };
            let r = forward_backward(&mut m, &self.x, &self.labels, &obj, &PassConfig::train(self.frozen_backbone), &mut rng)
                .unwrap();
            (r.loss, r.grads)
        }
    }

    /// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-5)` per trainable tensor
    /// between analytic gradients and central differences, over up to
    /// `per_tensor` evenly spaced elements. The floor keeps gradients that
    /// vanish identically (a bias ahead of a batch norm) from dividing noise
    /// by noise.
    pub fn check(g: &Graph, setup: &Setup, per_tensor: usize) -> Vec<(String, f64)> {
        check_with_step(g, setup, per_tensor, STEP)
    }

    pub fn check_with_step(g: &Graph, setup: &Setup, per_tensor: usize, step: f64) -> Vec<(String, f64)> {
        let model = Model::<f64>::from_graph(g).unwrap();
        let (_, grads) = setup.loss_and_grads(&model);
        let mut out = Vec::new();
        for (name, analytic) in &grads {
            let len = analytic.len();
            let stride = (len / per_tensor).max(1);
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for i in (0..len).step_by(stride) {
                let mut plus = model.clone();
                plus.params.get_mut(name).unwrap()[i] += step;
                let mut minus = model.clone();
                minus.params.get_mut(name).unwrap()[i] -= step;
                let numeric = (setup.loss_and_grads(&plus).0 - setup.loss_and_grads(&minus).0) / (2.0 * step);
                diff += (analytic[i] - numeric).powi(2);
                na += analytic[i].powi(2);
                nn += numeric.powi(2);
            }
            let denom = na.sqrt().max(nn.sqrt()).max(1e-5);
            out.push((name.clone(), diff.sqrt() / denom));
        }
        out
    }
}
