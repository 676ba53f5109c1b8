//! Simulated INT8 quantization for quantization-aware training.

use crate::quant::affine::{activation_params, QMAX, QMIN};
use crate::runtime::kernels::Scalar;

pub const EMA_MOMENTUM: f64 = 0.99;

/// Running range `[min, max, initialized]` as stored in a FakeQuant state tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuantState {
    pub min: f32,
    pub max: f32,
    pub initialized: bool,
}

impl FakeQuantState {
    pub fn from_slice<F: Scalar>(s: &[F]) -> Self {
        FakeQuantState { min: Scalar::to_f32(s[0]), max: Scalar::to_f32(s[1]), initialized: s[2] > F::zero() }
    }

    pub fn write<F: Scalar>(&self, s: &mut [F]) {
        s[0] = F::from_f32(self.min);
        s[1] = F::from_f32(self.max);
        s[2] = if self.initialized { F::one() } else { F::zero() };
    }

    /// Folds a batch range into the running range: first batch sets it,
    /// later batches move it by exponential moving average.
    pub fn observe(&mut self, lo: f32, hi: f32) {
        if self.initialized {
            let m = EMA_MOMENTUM;
            self.min = (m * self.min as f64 + (1.0 - m) * lo as f64) as f32;
            self.max = (m * self.max as f64 + (1.0 - m) * hi as f64) as f32;
        } else {
            (self.min, self.max, self.initialized) = (lo, hi, true);
        }
    }

    /// Interval covered by the quantization grid, widened to include zero.
    pub fn clip_range(&self) -> (f32, f32) {
        (self.min.min(0.0), self.max.max(0.0))
    }
}

/// `dequantize(quantize(x))` on the grid implied by `state`. An
/// uninitialized state is the identity.
pub fn fake_quant<F: Scalar>(x: &[F], state: &FakeQuantState) -> Vec<F> {
    if !state.initialized {
        return x.to_vec();
    }
    let qp = activation_params(state.min, state.max);
    let (s, z) = (qp.scale() as f64, qp.zero_point() as f64);
    x.iter()
        .map(|&v| {
            let q = ((v.widen() / s).round() + z).clamp(QMIN as f64, QMAX as f64);
            F::narrow((q - z) * s)
        })
        .collect()
}

/// Clipped straight-through gradient: `dy` where `x` lies inside the
/// quantization range, zero outside.
pub fn fake_quant_backward<F: Scalar>(dy: &mut [F], x: &[F], (lo, hi): (f32, f32)) {
    let (lo, hi) = (F::from_f32(lo), F::from_f32(hi));
    dy.iter_mut().zip(x).for_each(|(g, &v)| {
        if v < lo || v > hi {
            *g = F::zero();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::affine::dequantize_with;

    #[test]
    fn grid_values_pass_unchanged() {
        let st = FakeQuantState { min: 0.0, max: 2.55, initialized: true };
        let qp = activation_params(0.0, 2.55);
        let grid: Vec<f32> = (-128..=127).map(|q| dequantize_with(q as i8, qp.scale(), qp.zero_point())).collect();
        assert_eq!(fake_quant(&grid, &st), grid);
    }

    #[test]
    fn outside_range_gets_no_gradient() {
        let mut dy = vec![1.0f64; 4];
        fake_quant_backward(&mut dy, &[-0.5, 0.0, 1.0, 3.0], (0.0, 2.55));
        assert_eq!(dy, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn ema_after_first_batch() {
        let mut st = FakeQuantState { min: 0.0, max: 0.0, initialized: false };
        st.observe(-1.0, 1.0);
        assert_eq!((st.min, st.max), (-1.0, 1.0));
        st.observe(-2.0, 3.0);
        assert!((st.min + 1.01).abs() < 1e-6 && (st.max - 1.02).abs() < 1e-6);
    }
}
