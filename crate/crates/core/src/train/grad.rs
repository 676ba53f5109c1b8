//! Backward passes for the training kernels. Every reduction runs in a fixed
//! order so gradients are independent of the thread count.

use crate::model::{FusedActivation, Padding};
use crate::runtime::kernels::{ConvGeometry, KernelError, Scalar};
use crate::runtime::{par, Activation};

/// Multiplies `dy` by the derivative of a fused activation, read off its output.
pub fn activation_backward<F: Scalar>(dy: &mut [F], out: &[F], act: FusedActivation) {
    let six = F::from_f32(6.0);
    match act {
        FusedActivation::None => {}
        FusedActivation::Relu => dy.iter_mut().zip(out).for_each(|(g, &y)| {
            if y <= F::zero() {
                *g = F::zero();
            }
        }),
        FusedActivation::Relu6 => dy.iter_mut().zip(out).for_each(|(g, &y)| {
            if y <= F::zero() || y >= six {
                *g = F::zero();
            }
        }),
    }
}

pub struct ParamGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

/// Per-output-channel sums of `dy` laid out `[.., c]`.
fn channel_sums<F: Scalar>(dy: &[F], c: usize) -> Vec<F> {
    let mut s = vec![F::zero(); c];
    for px in dy.chunks(c) {
        for ch in 0..c {
            s[ch] = s[ch] + px[ch];
        }
    }
    s
}

/// Output rows `oy` whose window covers input row `iy` at tap `ky`.
#[inline]
fn source_out(i: usize, k: usize, pad: usize, stride: usize, out_len: usize) -> Option<usize> {
    let p = (i + pad).checked_sub(k)?;
    (p % stride == 0 && p / stride < out_len).then_some(p / stride)
}

pub fn conv2d_backward<F: Scalar>(
    x: &Activation<F>,
    w: &[F],
    w_shape: [usize; 4],
    dy: &[F],
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<ParamGrads<F>, KernelError> {
    let [out_c, k_h, k_w, in_c] = w_shape;
    let g = ConvGeometry::new(&x.shape, k_h, k_w, stride, padding)?;
    let positions = g.batch * g.out_h * g.out_w;
    // dy transposed to [out_c][positions] for contiguous per-filter sweeps.
    let mut dyt = vec![F::zero(); dy.len()];
    for p in 0..positions {
        for oc in 0..out_c {
            dyt[oc * positions + p] = dy[p * out_c + oc];
        }
    }
    let mut dw = vec![F::zero(); w.len()];
    par::for_each_chunk(&mut dw, k_h * k_w * in_c, |oc, dst| {
        let gy = &dyt[oc * positions..(oc + 1) * positions];
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let d = gy[(n * g.out_h + oy) * g.out_w + ox];
                    if d == F::zero() {
                        continue;
                    }
                    for ky in 0..k_h {
                        let Some(iy) = g.input_y(oy, ky) else { continue };
                        for kx in 0..k_w {
                            let Some(ix) = g.input_x(ox, kx) else { continue };
                            let base = ((n * g.in_h + iy) * g.in_w + ix) * in_c;
                            let wb = (ky * k_w + kx) * in_c;
                            for ci in 0..in_c {
                                dst[wb + ci] = dst[wb + ci] + d * x.data[base + ci];
                            }
                        }
                    }
                }
            }
        }
    });
    let db = channel_sums(dy, out_c);
    let dx = need_dx.then(|| {
        // wt[ky][kx][ci][oc] so the inner loop runs over output channels.
        let mut wt = vec![F::zero(); w.len()];
        for oc in 0..out_c {
            for t in 0..k_h * k_w {
                for ci in 0..in_c {
                    wt[(t * in_c + ci) * out_c + oc] = w[(oc * k_h * k_w + t) * in_c + ci];
                }
            }
        }
        let mut dx = vec![F::zero(); x.data.len()];
        par::for_each_chunk(&mut dx, g.in_w * in_c, |row, dst| {
            let (n, iy) = (row / g.in_h, row % g.in_h);
            for ky in 0..k_h {
                let Some(oy) = source_out(iy, ky, g.pad_top, stride, g.out_h) else { continue };
                for ix in 0..g.in_w {
                    for kx in 0..k_w {
                        let Some(ox) = source_out(ix, kx, g.pad_left, stride, g.out_w) else { continue };
                        let d = &dy[((n * g.out_h + oy) * g.out_w + ox) * out_c..][..out_c];
                        let wb = (ky * k_w + kx) * in_c;
                        for ci in 0..in_c {
                            let wr = &wt[(wb + ci) * out_c..][..out_c];
                            let mut acc = F::zero();
                            for oc in 0..out_c {
                                acc = acc + d[oc] * wr[oc];
                            }
                            dst[ix * in_c + ci] = dst[ix * in_c + ci] + acc;
                        }
                    }
                }
            }
        });
        dx
    });
    Ok(ParamGrads { dx, dw, db })
}

pub fn depthwise_backward<F: Scalar>(
    x: &Activation<F>,
    w: &[F],
    w_shape: [usize; 4],
    dy: &[F],
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<ParamGrads<F>, KernelError> {
    let [_, k_h, k_w, c] = w_shape;
    let g = ConvGeometry::new(&x.shape, k_h, k_w, stride, padding)?;
    let mut dw = vec![F::zero(); w.len()];
    par::for_each_chunk(&mut dw, c, |tap, dst| {
        let (ky, kx) = (tap / k_w, tap % k_w);
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                let Some(iy) = g.input_y(oy, ky) else { continue };
                for ox in 0..g.out_w {
                    let Some(ix) = g.input_x(ox, kx) else { continue };
                    let xb = ((n * g.in_h + iy) * g.in_w + ix) * c;
                    let yb = ((n * g.out_h + oy) * g.out_w + ox) * c;
                    for ch in 0..c {
                        dst[ch] = dst[ch] + dy[yb + ch] * x.data[xb + ch];
                    }
                }
            }
        }
    });
    let db = channel_sums(dy, c);
    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); x.data.len()];
        par::for_each_chunk(&mut dx, g.in_w * c, |row, dst| {
            let (n, iy) = (row / g.in_h, row % g.in_h);
            for ky in 0..k_h {
                let Some(oy) = source_out(iy, ky, g.pad_top, stride, g.out_h) else { continue };
                for ix in 0..g.in_w {
                    for kx in 0..k_w {
                        let Some(ox) = source_out(ix, kx, g.pad_left, stride, g.out_w) else { continue };
                        let yb = ((n * g.out_h + oy) * g.out_w + ox) * c;
                        let wb = (ky * k_w + kx) * c;
                        for ch in 0..c {
                            dst[ix * c + ch] = dst[ix * c + ch] + dy[yb + ch] * w[wb + ch];
                        }
                    }
                }
            }
        });
        dx
    });
    Ok(ParamGrads { dx, dw, db })
}

pub fn dense_backward<F: Scalar>(x: &Activation<F>, w: &[F], [out_f, in_f]: [usize; 2], dy: &[F], need_dx: bool) -> ParamGrads<F> {
    let n = x.shape[0];
    let mut dw = vec![F::zero(); w.len()];
    par::for_each_chunk(&mut dw, in_f, |o, dst| {
        for i in 0..n {
            let d = dy[i * out_f + o];
            let xr = &x.data[i * in_f..(i + 1) * in_f];
            dst.iter_mut().zip(xr).for_each(|(a, &v)| *a = *a + d * v);
        }
    });
    let db = channel_sums(dy, out_f);
    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); n * in_f];
        par::for_each_chunk(&mut dx, in_f, |i, dst| {
            for o in 0..out_f {
                let d = dy[i * out_f + o];
                let wr = &w[o * in_f..(o + 1) * in_f];
                dst.iter_mut().zip(wr).for_each(|(a, &v)| *a = *a + d * v);
            }
        });
        dx
    });
    ParamGrads { dx, dw, db }
}

/// Saved state of a batch-norm forward pass.
pub struct BnCache<F> {
    /// Normalized input; present for batch-statistics passes.
    pub x_hat: Option<Vec<F>>,
    pub inv_std: Vec<F>,
    /// Input minus mean, for the inference-mode gamma gradient.
    pub centered: Option<Vec<F>>,
}

/// Training-mode batch norm: normalizes with the batch mean and biased
/// variance over every axis but the last. Returns the output, the cache and
/// the batch moments.
pub fn batchnorm_train<F: Scalar>(x: &Activation<F>, gamma: &[F], beta: &[F], epsilon: F) -> (Activation<F>, BnCache<F>, Vec<F>, Vec<F>) {
    let c = x.channels();
    let m = F::from(x.data.len() / c).unwrap();
    let mean: Vec<F> = channel_sums(&x.data, c).into_iter().map(|s| s / m).collect();
    let mut var = vec![F::zero(); c];
    for px in x.data.chunks(c) {
        for ch in 0..c {
            let d = px[ch] - mean[ch];
            var[ch] = var[ch] + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<F> = var.iter().map(|&v| (v + epsilon).sqrt().recip()).collect();
    let mut x_hat = x.data.clone();
    let mut out = x.data.clone();
    for (xh, o) in x_hat.chunks_mut(c).zip(out.chunks_mut(c)) {
        for ch in 0..c {
            xh[ch] = (xh[ch] - mean[ch]) * inv_std[ch];
            o[ch] = gamma[ch] * xh[ch] + beta[ch];
        }
    }
    let cache = BnCache { x_hat: Some(x_hat), inv_std, centered: None };
    (Activation::new(x.shape.clone(), out), cache, mean, var)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<F: Scalar>(dy: &[F], gamma: &[F], cache: &BnCache<F>, need_dx: bool) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let c = gamma.len();
    let dbeta = channel_sums(dy, c);
    let normalized = cache.x_hat.as_ref().or(cache.centered.as_ref()).expect("cache holds activations");
    let mut dgamma = vec![F::zero(); c];
    for (d, xh) in dy.chunks(c).zip(normalized.chunks(c)) {
        for ch in 0..c {
            dgamma[ch] = dgamma[ch] + d[ch] * xh[ch];
        }
    }
    if cache.x_hat.is_none() {
        dgamma.iter_mut().zip(&cache.inv_std).for_each(|(g, &s)| *g = *g * s);
    }
    let dx = need_dx.then(|| {
        let mut dx = dy.to_vec();
        match &cache.x_hat {
            Some(x_hat) => {
                let m = F::from(dy.len() / c).unwrap();
                for ((d, o), xh) in dy.chunks(c).zip(dx.chunks_mut(c)).zip(x_hat.chunks(c)) {
                    for ch in 0..c {
                        let k = gamma[ch] * cache.inv_std[ch] / m;
                        o[ch] = k * (m * d[ch] - dbeta[ch] - xh[ch] * dgamma[ch]);
                    }
                }
            }
            None => {
                for o in dx.chunks_mut(c) {
                    for ch in 0..c {
                        o[ch] = o[ch] * gamma[ch] * cache.inv_std[ch];
                    }
                }
            }
        }
        dx
    });
    (dx, dgamma, dbeta)
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &[F], x_shape: &[usize]) -> Vec<F> {
    let (n, hw, c) = (x_shape[0], x_shape[1] * x_shape[2], x_shape[3]);
    let denom = F::from(hw).unwrap();
    let mut dx = Vec::with_capacity(n * hw * c);
    for i in 0..n {
        let d: Vec<F> = dy[i * c..(i + 1) * c].iter().map(|&v| v / denom).collect();
        for _ in 0..hw {
            dx.extend_from_slice(&d);
        }
    }
    dx
}

/// Splits a concatenated gradient back into per-input pieces.
pub fn concat_backward<F: Scalar>(dy: &[F], channels: &[usize]) -> Vec<Vec<F>> {
    let total: usize = channels.iter().sum();
    let pixels = dy.len() / total;
    let mut parts: Vec<Vec<F>> = channels.iter().map(|&c| Vec::with_capacity(pixels * c)).collect();
    for px in dy.chunks(total) {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&px[off..off + c]);
            off += c;
        }
    }
    parts
}
