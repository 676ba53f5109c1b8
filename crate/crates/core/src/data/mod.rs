//! Dataset scanning, splitting, preprocessing, augmentation, batching and a
//! synthetic dataset generator.

pub mod augment;
pub mod batch;
pub mod index;
pub mod preprocess;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::{augment, AugmentConfig};
pub use batch::{Batches, LabeledImages};
pub use index::{scan_dataset, stratified_split, DatasetIndex, SplitRounding};
pub use preprocess::{load_image, preprocess, resize_bilinear};
pub use synth::synth_dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("dataset root {0} has no class folders")]
    NoClasses(PathBuf),
    #[error("class folder {0:?} contains no images")]
    EmptyClass(String),
    #[error("class {class:?} has {count} sample(s); stratified splitting needs at least 2")]
    TooFewSamples { class: String, count: usize },
    #[error("split fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("cannot decode {}: {}", .0.iter().map(|(p, _)| p.display().to_string()).collect::<Vec<_>>().join(", "), .0.first().map(|(_, e)| e.as_str()).unwrap_or(""))]
    Decode(Vec<(PathBuf, String)>),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
}
