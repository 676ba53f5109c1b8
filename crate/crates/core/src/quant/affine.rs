//! The affine real-to-int8 map and the parameter rules built on it.

use crate::model::QuantParams;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// `clamp(round_half_away(r / scale) + zero_point, -128, 127)`.
#[inline]
pub fn quantize_with(r: f32, scale: f32, zero_point: i32) -> i8 {
    let q = (r as f64 / scale as f64).round() + zero_point as f64;
    q.clamp(QMIN as f64, QMAX as f64) as i8
}

#[inline]
pub fn dequantize_with(q: i8, scale: f32, zero_point: i32) -> f32 {
    (q as i32 - zero_point) as f32 * scale
}

/// Quantizes with per-tensor parameters (the first scale and zero point).
pub fn quantize_value(r: f32, qp: &QuantParams) -> i8 {
    quantize_with(r, qp.scale(), qp.zero_point())
}

pub fn dequantize_value(q: i8, qp: &QuantParams) -> f32 {
    dequantize_with(q, qp.scale(), qp.zero_point())
}

/// Real interval exactly covered by the int8 grid of `qp`.
pub fn representable_range(qp: &QuantParams) -> (f32, f32) {
    let (s, z) = (qp.scale(), qp.zero_point());
    ((QMIN - z) as f32 * s, (QMAX - z) as f32 * s)
}

/// Per-tensor asymmetric parameters for an observed activation range.
///
/// The range is widened to contain zero so that zero (ReLU outputs, padding)
/// is exactly representable. `scale = (max - min) / 255` and
/// `zero_point = round(-128 - min / scale)` clamped to the int8 range. A
/// degenerate range yields scale 1 and zero point 0.
pub fn activation_params(min: f32, max: f32) -> QuantParams {
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    if !(hi > lo) {
        return QuantParams::per_tensor(1.0, 0);
    }
    let scale = (hi - lo) / 255.0;
    let zp = (QMIN as f32 - lo / scale).round() as i32;
    QuantParams::per_tensor(scale, zp.clamp(QMIN, QMAX))
}

/// Symmetric scale for a weight channel: `max|w| / 127` (1 for all-zero rows).
pub fn symmetric_scale(max_abs: f32) -> f32 {
    if max_abs > 0.0 {
        max_abs / 127.0
    } else {
        1.0
    }
}
