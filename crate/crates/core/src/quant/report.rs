use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::model::tmf;

/// Size and accuracy comparison of an original and a compressed artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
    pub baseline_accuracy: f64,
    pub quantized_accuracy: f64,
    /// `baseline - quantized`; negative when quantization helped.
    pub accuracy_delta: f64,
}

impl CompressionReport {
    pub fn from_sizes(original_bytes: u64, compressed_bytes: u64, baseline_accuracy: f64, quantized_accuracy: f64) -> Self {
        CompressionReport {
            original_bytes,
            compressed_bytes,
            ratio: original_bytes as f64 / compressed_bytes as f64,
            baseline_accuracy,
            quantized_accuracy,
            accuracy_delta: baseline_accuracy - quantized_accuracy,
        }
    }
}

/// Builds the report from the on-disk sizes of two TMF files. Both must parse.
pub fn compression_report(
    original: impl AsRef<Path>,
    compressed: impl AsRef<Path>,
    baseline_accuracy: f64,
    quantized_accuracy: f64,
) -> Result<CompressionReport, QuantError> {
    let size = |p: &Path| -> Result<u64, QuantError> {
        tmf::read_file(p)?;
        Ok(std::fs::metadata(p).map_err(crate::model::TmfError::Io)?.len())
    };
    Ok(CompressionReport::from_sizes(
        size(original.as_ref())?,
        size(compressed.as_ref())?,
        baseline_accuracy,
        quantized_accuracy,
    ))
}
