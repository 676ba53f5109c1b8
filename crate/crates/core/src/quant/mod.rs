//! Post-training quantization: Float16 weights, INT8 with calibration, and
//! compression reporting.

pub mod affine;
pub mod calibrate;
pub mod f16;
pub mod int8;
pub mod report;

use thiserror::Error;

use crate::model::TmfError;
use crate::runtime::ExecError;

pub use affine::{activation_params, dequantize_value, quantize_value, symmetric_scale};
pub use calibrate::{calibrate, CalibrationStats};
pub use f16::{quantize_f16, to_f16_graph};
pub use int8::quantize_int8;
pub use report::{compression_report, CompressionReport};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("tensor {tensor:?} holds {value}, beyond the Float16 range")]
    F16Overflow { tensor: String, value: f32 },
    #[error("no calibration range for activation {0:?}")]
    MissingStats(String),
    #[error("calibration source yielded no samples")]
    EmptyCalibration,
    #[error("tensor {0:?} is not F32")]
    NotFloat(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Tmf(#[from] TmfError),
}
