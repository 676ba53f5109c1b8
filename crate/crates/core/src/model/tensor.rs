use half::f16;
use serde::{Deserialize, Serialize};

/// Element type of a stored tensor.
///
/// `I32` is only used for integer bias vectors that feed the I32 accumulator
/// of quantized kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }
}

/// Affine quantization parameters, either per-tensor (one scale) or
/// per-channel along `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32) -> Self {
        QuantParams {
            scales: vec![scale],
            zero_points: vec![zero_point],
            axis: None,
        }
    }

    /// Symmetric per-channel parameters (all zero points 0).
    pub fn per_channel(scales: Vec<f32>, axis: usize) -> Self {
        let zero_points = vec![0; scales.len()];
        QuantParams {
            scales,
            zero_points,
            axis: Some(axis),
        }
    }

    pub fn is_per_channel(&self) -> bool {
        self.axis.is_some()
    }

    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_points[0]
    }

    pub fn check(&self) -> Result<(), String> {
        if self.scales.is_empty() {
            return Err("no scales".into());
        }
        if self.scales.len() != self.zero_points.len() {
            return Err(format!(
                "{} scales but {} zero points",
                self.scales.len(),
                self.zero_points.len()
            ));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(format!("non-positive scale {s}"));
        }
        match self.axis {
            None => {
                if self.scales.len() != 1 {
                    return Err("per-tensor params must have exactly one scale".into());
                }
                if !(-128..=127).contains(&self.zero_points[0]) {
                    return Err(format!("zero point {} outside [-128, 127]", self.zero_points[0]));
                }
            }
            Some(_) => {
                if self.zero_points.iter().any(|&z| z != 0) {
                    return Err("per-channel params must be symmetric".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub quant: Option<QuantParams>,
    /// Present only while training (optimizer slots, fake-quant state).
    pub training_only: bool,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::F32(data),
            quant: None,
            training_only: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::f32(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::f32(shape, vec![value; n])
    }

    pub fn training_only(mut self) -> Self {
        self.training_only = true;
        self
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().size()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut Vec<f32>> {
        match &mut self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Real-valued view of the tensor. F16 is widened, integer tensors are
    /// dequantized with their quantization parameters (identity if absent).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            TensorData::I8(v) => self.dequantize_ints(v.iter().map(|&q| q as i32)),
            TensorData::I32(v) => self.dequantize_ints(v.iter().copied()),
        }
    }

    fn dequantize_ints(&self, values: impl Iterator<Item = i32>) -> Vec<f32> {
        let Some(qp) = &self.quant else {
            return values.map(|q| q as f32).collect();
        };
        let channel_of = channel_index_fn(&self.shape, qp.axis);
        values
            .enumerate()
            .map(|(i, q)| {
                let c = channel_of(i);
                (q - qp.zero_points[c]) as f32 * qp.scales[c]
            })
            .collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn data_from_le_bytes(dtype: DType, bytes: &[u8]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        }
    }
}

/// Maps a flat row-major element index to its channel along `axis`.
pub(crate) fn channel_index_fn(shape: &[usize], axis: Option<usize>) -> impl Fn(usize) -> usize {
    let (inner, dim) = match axis {
        Some(a) if a < shape.len() => (shape[a + 1..].iter().product::<usize>(), shape[a]),
        _ => (1, 1),
    };
    move |i| if dim == 1 { 0 } else { (i / inner) % dim }
}
