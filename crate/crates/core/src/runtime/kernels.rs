//! Floating-point inference kernels over NHWC activations.
//!
//! Kernels are generic over the element type so the training engine can run
//! the same arithmetic in `f64` for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

use super::par;
use crate::model::{FusedActivation, Padding};

pub trait Scalar: Float + Sum + Send + Sync + Debug + 'static {
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn widen(self) -> f64 {
        self
    }
    fn narrow(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// A batched activation tensor: `[n, h, w, c]` or `[n, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation<F = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Activation<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} elements", data.len());
        Activation { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Activation { shape, data: vec![F::zero(); n] }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn cast<G: Scalar>(&self) -> Activation<G> {
        Activation {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from(v).unwrap()).collect(),
        }
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Convolution geometry shared by the dense and depthwise kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], k_h: usize, k_w: usize, stride: usize, padding: Padding) -> Result<Self, KernelError> {
        if x_shape.len() != 4 {
            return Err(KernelError::ShapeMismatch(format!("expected NHWC input, got {x_shape:?}")));
        }
        let (out_h, pad_top) = padding
            .output_dim(x_shape[1], k_h, stride)
            .ok_or_else(|| KernelError::ShapeMismatch(format!("kernel {k_h}x{k_w} exceeds input {x_shape:?}")))?;
        let (out_w, pad_left) = padding
            .output_dim(x_shape[2], k_w, stride)
            .ok_or_else(|| KernelError::ShapeMismatch(format!("kernel {k_h}x{k_w} exceeds input {x_shape:?}")))?;
        Ok(ConvGeometry {
            batch: x_shape[0],
            in_h: x_shape[1],
            in_w: x_shape[2],
            in_c: x_shape[3],
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    pub fn input_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad_top).filter(|&y| y < self.in_h)
    }

    #[inline]
    pub fn input_x(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx).checked_sub(self.pad_left).filter(|&x| x < self.in_w)
    }
}

#[inline]
pub fn activate<F: Scalar>(v: F, act: FusedActivation) -> F {
    match act {
        FusedActivation::None => v,
        FusedActivation::Relu => v.max(F::zero()),
        FusedActivation::Relu6 => v.max(F::zero()).min(F::from_f32(6.0)),
    }
}

/// Standard 2-D cross-correlation. Weights are `[out, kh, kw, in]`.
pub fn conv2d<F: Scalar>(
    x: &Activation<F>,
    weights: &[F],
    w_shape: [usize; 4],
    bias: Option<&[F]>,
    stride: usize,
    padding: Padding,
    act: FusedActivation,
) -> Result<Activation<F>, KernelError> {
    let [out_c, k_h, k_w, w_in] = w_shape;
    let g = ConvGeometry::new(&x.shape, k_h, k_w, stride, padding)?;
    if w_in != g.in_c {
        return Err(KernelError::ChannelMismatch(format!(
            "weights expect {w_in} input channels, activation has {}",
            g.in_c
        )));
    }
    check_len("weights", weights.len(), out_c * k_h * k_w * w_in)?;
    if let Some(b) = bias {
        check_len("bias", b.len(), out_c)?;
    }
    let mut out = vec![F::zero(); g.batch * g.out_h * g.out_w * out_c];
    let row_len = g.out_w * out_c;
    par::for_each_chunk(&mut out, row_len, |row, dst| {
        let (n, oy) = (row / g.out_h, row % g.out_h);
        for ox in 0..g.out_w {
            let acc = &mut dst[ox * out_c..(ox + 1) * out_c];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..k_h {
                let Some(iy) = g.input_y(oy, ky) else { continue };
                for kx in 0..k_w {
                    let Some(ix) = g.input_x(ox, kx) else { continue };
                    let base = ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
                    let xin = &x.data[base..base + g.in_c];
                    for (oc, a) in acc.iter_mut().enumerate() {
                        let wb = ((oc * k_h + ky) * k_w + kx) * w_in;
                        *a = *a + dot(xin, &weights[wb..wb + w_in]);
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a = activate(*a, act));
        }
    });
    Ok(Activation::new(vec![g.batch, g.out_h, g.out_w, out_c], out))
}

/// One filter per channel. Weights are `[1, kh, kw, channels]`.
pub fn depthwise_conv2d<F: Scalar>(
    x: &Activation<F>,
    weights: &[F],
    w_shape: [usize; 4],
    bias: Option<&[F]>,
    stride: usize,
    padding: Padding,
    act: FusedActivation,
) -> Result<Activation<F>, KernelError> {
    let [mult, k_h, k_w, w_c] = w_shape;
    let g = ConvGeometry::new(&x.shape, k_h, k_w, stride, padding)?;
    if mult != 1 || w_c != g.in_c {
        return Err(KernelError::ChannelMismatch(format!(
            "depthwise weights {w_shape:?} for {} channels",
            g.in_c
        )));
    }
    check_len("weights", weights.len(), k_h * k_w * w_c)?;
    if let Some(b) = bias {
        check_len("bias", b.len(), w_c)?;
    }
    let c = g.in_c;
    let mut out = vec![F::zero(); g.batch * g.out_h * g.out_w * c];
    par::for_each_chunk(&mut out, g.out_w * c, |row, dst| {
        let (n, oy) = (row / g.out_h, row % g.out_h);
        for ox in 0..g.out_w {
            let acc = &mut dst[ox * c..(ox + 1) * c];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..k_h {
                let Some(iy) = g.input_y(oy, ky) else { continue };
                for kx in 0..k_w {
                    let Some(ix) = g.input_x(ox, kx) else { continue };
                    let base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                    let wb = (ky * k_w + kx) * c;
                    for ch in 0..c {
                        acc[ch] = acc[ch] + x.data[base + ch] * weights[wb + ch];
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a = activate(*a, act));
        }
    });
    Ok(Activation::new(vec![g.batch, g.out_h, g.out_w, c], out))
}

/// `y = x Wᵀ + b` with weights stored `[out, in]`.
pub fn dense<F: Scalar>(
    x: &Activation<F>,
    weights: &[F],
    w_shape: [usize; 2],
    bias: Option<&[F]>,
    act: FusedActivation,
) -> Result<Activation<F>, KernelError> {
    let [out_f, in_f] = w_shape;
    if x.shape.len() != 2 || x.shape[1] != in_f {
        return Err(KernelError::ShapeMismatch(format!(
            "dense expects [n, {in_f}], got {:?}",
            x.shape
        )));
    }
    check_len("weights", weights.len(), out_f * in_f)?;
    if let Some(b) = bias {
        check_len("bias", b.len(), out_f)?;
    }
    let n = x.shape[0];
    let mut out = vec![F::zero(); n * out_f];
    // Parallelize over output features; each output is one sequential dot.
    let cols = par::map_range(out_f, |o| {
        let w = &weights[o * in_f..(o + 1) * in_f];
        let b = bias.map_or(F::zero(), |b| b[o]);
        (0..n)
            .map(|i| activate(F::narrow(b.widen() + dot_wide(&x.data[i * in_f..(i + 1) * in_f], w)), act))
            .collect::<Vec<F>>()
    });
    for (o, col) in cols.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            out[i * out_f + o] = v;
        }
    }
    Ok(Activation::new(vec![n, out_f], out))
}

/// Inference-mode batch normalization over the last (channel) axis.
pub fn batchnorm_inference<F: Scalar>(
    x: &Activation<F>,
    gamma: &[F],
    beta: &[F],
    mean: &[F],
    variance: &[F],
    epsilon: F,
) -> Result<Activation<F>, KernelError> {
    let c = x.channels();
    for (name, p) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("variance", variance)] {
        if p.len() != c {
            return Err(KernelError::ChannelMismatch(format!("{name} has {} entries for {c} channels", p.len())));
        }
    }
    let inv: Vec<F> = variance.iter().map(|&v| (v + epsilon).sqrt().recip()).collect();
    let mut out = x.data.clone();
    for px in out.chunks_mut(c) {
        for ch in 0..c {
            px[ch] = gamma[ch] * (px[ch] - mean[ch]) * inv[ch] + beta[ch];
        }
    }
    Ok(Activation::new(x.shape.clone(), out))
}

pub fn apply_activation<F: Scalar>(x: &Activation<F>, act: FusedActivation) -> Activation<F> {
    Activation::new(x.shape.clone(), x.data.iter().map(|&v| activate(v, act)).collect())
}

/// Per-channel spatial mean: `[n, h, w, c]` to `[n, c]`.
pub fn global_avg_pool<F: Scalar>(x: &Activation<F>) -> Result<Activation<F>, KernelError> {
    if x.shape.len() != 4 {
        return Err(KernelError::ShapeMismatch(format!("pooling expects NHWC, got {:?}", x.shape)));
    }
    let (n, hw, c) = (x.shape[0], x.shape[1] * x.shape[2], x.shape[3]);
    let denom = F::from(hw).unwrap();
    let mut out = vec![F::zero(); n * c];
    for i in 0..n {
        let sample = &x.data[i * hw * c..(i + 1) * hw * c];
        let acc = &mut out[i * c..(i + 1) * c];
        for px in sample.chunks(c) {
            for ch in 0..c {
                acc[ch] = acc[ch] + px[ch];
            }
        }
        acc.iter_mut().for_each(|a| *a = *a / denom);
    }
    Ok(Activation::new(vec![n, c], out))
}

/// Row-wise `softmax(z / T)` with max subtraction.
pub fn softmax_t<F: Scalar>(logits: &Activation<F>, temperature: F) -> Result<Activation<F>, KernelError> {
    if !(temperature > F::zero()) {
        return Err(KernelError::BadTemperature(temperature.to_f64().unwrap_or(f64::NAN)));
    }
    let k = logits.channels();
    let mut out = logits.data.clone();
    for row in out.chunks_mut(k) {
        softmax_row(row, temperature);
    }
    Ok(Activation::new(logits.shape.clone(), out))
}

/// In-place temperature softmax of one row.
pub fn softmax_row<F: Scalar>(row: &mut [F], temperature: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

pub fn residual_add<F: Scalar>(a: &Activation<F>, b: &Activation<F>) -> Result<Activation<F>, KernelError> {
    if a.shape != b.shape {
        return Err(KernelError::ShapeMismatch(format!("{:?} + {:?}", a.shape, b.shape)));
    }
    Ok(Activation::new(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    ))
}

/// Channel-axis concatenation of NHWC tensors.
pub fn concat_channels<F: Scalar>(xs: &[&Activation<F>]) -> Result<Activation<F>, KernelError> {
    let first = xs.first().ok_or_else(|| KernelError::ShapeMismatch("empty concat".into()))?;
    let spatial = &first.shape[..first.shape.len() - 1];
    if xs.iter().any(|x| x.shape.len() != first.shape.len() || &x.shape[..x.shape.len() - 1] != spatial) {
        return Err(KernelError::ShapeMismatch("concat inputs differ outside the channel axis".into()));
    }
    let total_c: usize = xs.iter().map(|x| x.channels()).sum();
    let pixels: usize = spatial.iter().product();
    let mut out = Vec::with_capacity(pixels * total_c);
    for p in 0..pixels {
        for x in xs {
            let c = x.channels();
            out.extend_from_slice(&x.data[p * c..(p + 1) * c]);
        }
    }
    let mut shape = spatial.to_vec();
    shape.push(total_c);
    Ok(Activation::new(shape, out))
}

/// Dot product accumulated in `f64` over four interleaved partial sums.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    F::narrow(dot_wide(a, b))
}

#[inline]
pub fn dot_wide<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    let n = a.len().min(b.len());
    let mut lanes = [0f64; 4];
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            lanes[k] += x[k].widen() * y[k].widen();
        }
    }
    for (k, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        lanes[k] += x.widen() * y.widen();
    }
    (lanes[0] + lanes[2]) + (lanes[1] + lanes[3])
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<(), KernelError> {
    if got == expected {
        Ok(())
    } else {
        Err(KernelError::ShapeMismatch(format!("{what} has {got} elements, expected {expected}")))
    }
}
