use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Violation};
use super::tensor::Tensor;

pub const ADAM_M_SUFFIX: &str = "/adam_m";
pub const ADAM_V_SUFFIX: &str = "/adam_v";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: usize,
    pub epoch: usize,
    pub seed: u64,
    /// Number of optimizer steps taken, used for Adam bias correction.
    pub adam_step: u64,
}

/// A graph plus its training-only optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: Graph,
    pub optimizer_slots: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(graph: Graph, seed: u64) -> Self {
        Checkpoint {
            graph,
            optimizer_slots: BTreeMap::new(),
            meta: CheckpointMeta { seed, ..Default::default() },
        }
    }

    /// Checkpoint with zeroed Adam moment slots for every trainable tensor.
    pub fn with_adam_slots(graph: Graph, seed: u64) -> Self {
        let mut ckpt = Checkpoint::new(graph, seed);
        for name in ckpt.graph.trainable_tensors() {
            let shape = ckpt.graph.tensors[&name].shape.clone();
            for suffix in [ADAM_M_SUFFIX, ADAM_V_SUFFIX] {
                ckpt.optimizer_slots
                    .insert(format!("{name}{suffix}"), Tensor::zeros(shape.clone()).training_only());
            }
        }
        ckpt
    }

    pub fn slot_param_name(slot: &str) -> Option<&str> {
        slot.strip_suffix(ADAM_M_SUFFIX)
            .or_else(|| slot.strip_suffix(ADAM_V_SUFFIX))
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = self.graph.validate().err().unwrap_or_default();
        for (name, slot) in &self.optimizer_slots {
            let detail = if !slot.training_only {
                Some("optimizer slot not flagged training_only".to_string())
            } else if self.graph.tensors.contains_key(name) {
                Some("slot name collides with a graph tensor".to_string())
            } else {
                match Checkpoint::slot_param_name(name).and_then(|p| self.graph.tensors.get(p)) {
                    None => Some("slot has no parameter tensor".to_string()),
                    Some(p) if p.shape != slot.shape => {
                        Some(format!("slot shape {:?} != parameter shape {:?}", slot.shape, p.shape))
                    }
                    Some(_) => None,
                }
            };
            if let Some(detail) = detail {
                violations.push(Violation::BadTensor { tensor: name.clone(), detail });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Bytes held by optimizer slots.
    pub fn slot_bytes(&self) -> usize {
        self.optimizer_slots.values().map(Tensor::byte_len).sum()
    }
}
