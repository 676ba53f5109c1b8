//! Deterministic training: backprop over the graph ops, Adam, the staged
//! schedule with plateau reduction and early stopping, quantization-aware
//! training and distillation.

pub mod adam;
pub mod engine;
pub mod fake_quant;
pub mod grad;
pub mod loss;
pub mod qat;
pub mod schedule;
pub mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AugmentConfig;
use crate::model::builders::{BuildError, DenseNetConfig, MobileNetV2Config};
use crate::model::{Graph, Violation};
use crate::runtime::{ExecError, KernelError};

pub use adam::{adam_step, AdamConfig};
pub use engine::{backward, forward, forward_backward, l2_penalty, Model, Objective, PassConfig, Phase};
pub use fake_quant::{fake_quant, FakeQuantState};
pub use loss::{cross_entropy, kd_loss, KdConfig};
pub use qat::insert_fake_quant;
pub use schedule::{early_stop_trace, plateau_trace, EarlyStopPolicy, EarlyStopping, Monitor, Plateau, PlateauPolicy};
pub use trainer::{evaluate, three_stage_train, EpochRecord, TrainHistory, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
    #[error("tensor {0:?} is not F32; training needs a float graph")]
    NotFloat(String),
    #[error("input batch has shape {got:?}, expected [n, {}, {}, {}]", .expected[0], .expected[1], .expected[2])]
    InputShape { got: Vec<usize>, expected: [usize; 3] },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("student logits {student:?} and teacher logits {teacher:?} differ in shape")]
    ClassCount { student: Vec<usize>, teacher: Vec<usize> },
    #[error("{node}: {source}")]
    Kernel { node: String, source: KernelError },
    #[error("teacher: {0}")]
    Teacher(#[from] ExecError),
    #[error("bad training config: {0}")]
    Config(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("checkpoint callback: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub frozen_backbone: bool,
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub plateau: Option<PlateauPolicy>,
    pub early_stop: EarlyStopPolicy,
    /// Inserts fake-quant nodes before this stage if the graph has none.
    #[serde(default)]
    pub fake_quant: bool,
}

impl StageConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.early_stop.patience == 0 || self.plateau.is_some_and(|p| p.patience == 0) {
            return bad("patience must be at least 1".into());
        }
        if self.plateau.is_some_and(|p| !(p.factor > 0.0 && p.factor < 1.0)) {
            return bad("plateau factor must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Which network to build for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `mobilenetv2` or `densenet`.
    pub arch: String,
    /// `standard` or `desk` for MobileNetV2; a DenseNet preset name otherwise.
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_width")]
    pub width: f32,
}

fn default_preset() -> String {
    "desk".into()
}

fn default_width() -> f32 {
    1.0
}

impl ModelSpec {
    pub fn build(&self, num_classes: usize, input_size: usize, seed: u64) -> Result<Graph, TrainError> {
        match (self.arch.as_str(), self.preset.as_str()) {
            ("mobilenetv2", "standard") => {
                Ok(MobileNetV2Config { input_size, ..MobileNetV2Config::standard(self.width) }.build(num_classes, seed)?)
            }
            ("mobilenetv2", "desk") => {
                Ok(MobileNetV2Config { width: self.width, ..MobileNetV2Config::desk(input_size) }.build(num_classes, seed)?)
            }
            ("densenet", preset) => DenseNetConfig::preset(preset, input_size)
                .ok_or_else(|| TrainError::Config(format!("unknown DenseNet preset {preset:?}")))?
                .build(num_classes, seed)
                .map_err(Into::into),
            (arch, preset) => Err(TrainError::Config(format!("unknown model {arch}/{preset}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub image_size: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// `null` disables augmentation.
    #[serde(default = "default_augment")]
    pub augment: Option<AugmentConfig>,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub kd: Option<KdConfig>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_batch() -> usize {
    32
}

fn default_fraction() -> f64 {
    0.2
}

fn default_seed() -> u64 {
    42
}

fn default_augment() -> Option<AugmentConfig> {
    Some(AugmentConfig::default())
}

impl TrainConfig {
    /// The reference schedule: frozen-backbone head training at 1e-3, full
    /// fine-tuning at 1e-5 with plateau (0.5, 4), then 5e-6 with plateau
    /// (0.3, 3), early stopping on validation accuracy throughout.
    pub fn reference() -> Self {
        TrainConfig {
            model: ModelSpec { arch: "mobilenetv2".into(), preset: "standard".into(), width: 1.0 },
            image_size: 224,
            batch_size: 32,
            validation_fraction: 0.2,
            seed: 42,
            augment: Some(AugmentConfig::default()),
            stages: vec![
                StageConfig {
                    frozen_backbone: true,
                    learning_rate: 1e-3,
                    max_epochs: 15,
                    plateau: None,
                    early_stop: EarlyStopPolicy::new(4),
                    fake_quant: false,
                },
                StageConfig {
                    frozen_backbone: false,
                    learning_rate: 1e-5,
                    max_epochs: 30,
                    plateau: Some(PlateauPolicy::new(0.5, 4)),
                    early_stop: EarlyStopPolicy::new(8),
                    fake_quant: false,
                },
                StageConfig {
                    frozen_backbone: false,
                    learning_rate: 5e-6,
                    max_epochs: 20,
                    plateau: Some(PlateauPolicy::new(0.3, 3)),
                    early_stop: EarlyStopPolicy::new(8),
                    fake_quant: false,
                },
            ],
            kd: None,
            adam: AdamConfig::default(),
        }
    }

    /// The same three-stage shape for a randomly initialized desk-scale
    /// network. Without pretrained features the fine-tuning rates are raised
    /// and the epoch budgets shortened.
    pub fn desk(image_size: usize) -> Self {
        let mut cfg = TrainConfig::reference();
        cfg.model = ModelSpec { arch: "mobilenetv2".into(), preset: "desk".into(), width: 1.0 };
        cfg.image_size = image_size;
        let lrs = [3e-3, 2e-3, 5e-4];
        let epochs = [6, 14, 6];
        for ((s, lr), e) in cfg.stages.iter_mut().zip(lrs).zip(epochs) {
            s.learning_rate = lr;
            s.max_epochs = e;
        }
        cfg.stages[1].early_stop = EarlyStopPolicy::new(5);
        cfg.stages[2].early_stop = EarlyStopPolicy::new(4);
        cfg
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::Config("at least one stage is required".into()));
        }
        if self.batch_size == 0 || self.image_size == 0 {
            return Err(TrainError::Config("batch size and image size must be positive".into()));
        }
        if let Some(kd) = &self.kd {
            kd.check()?;
        }
        self.stages.iter().try_for_each(StageConfig::check)
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }
}
