//! The staged training loop.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::adam_step;
use super::engine::{forward, forward_backward, l2_penalty, Grads, Model, Objective, PassConfig};
use super::loss::cross_entropy;
use super::qat::insert_fake_quant;
use super::schedule::{EarlyStopping, Monitor, Plateau};
use super::{TrainConfig, TrainError};
use crate::data::LabeledImages;
use crate::model::checkpoint::{ADAM_M_SUFFIX, ADAM_V_SUFFIX};
use crate::model::{Checkpoint, CheckpointMeta, Graph, Tensor};
use crate::runtime::{Activation, ExecutionMode, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based stage and epoch within the stage.
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Best epoch of each stage, 1-based within the stage.
    pub stage_best: Vec<usize>,
    /// Index into `epochs` of the epoch whose weights were kept at the end.
    pub best_index: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_index]
    }

    pub fn stage(&self, stage: usize) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Validation loss (cross-entropy plus L2) and accuracy in inference mode.
pub fn evaluate(model: &mut Model<f32>, data: &LabeledImages, batch_size: usize) -> Result<(f64, f64, Vec<usize>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut hits, mut preds) = (0.0f64, 0usize, Vec::with_capacity(data.len()));
    for (x, labels) in data.eval_batches(batch_size) {
        let tape = forward(model, &x, &PassConfig::eval(), &mut rng)?;
        let (l, _) = cross_entropy(&tape.logits, &labels)?;
        loss += l as f64 * labels.len() as f64;
        let p = tape.logits.argmax_rows();
        hits += p.iter().zip(&labels).filter(|(a, b)| a == b).count();
        preds.extend(p);
    }
    let n = data.len().max(1) as f64;
    let l2 = l2_penalty(model, &mut Grads::new()) as f64;
    Ok((loss / n + l2, hits as f64 / n, preds))
}

struct AdamSlots {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl AdamSlots {
    fn new(model: &Model<f32>) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = model
            .graph
            .trainable_tensors()
            .into_iter()
            .map(|n| {
                let len = model.params[&n].len();
                (n, vec![0.0; len])
            })
            .collect();
        AdamSlots { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Clone)]
struct Snapshot {
    params: BTreeMap<String, Vec<f32>>,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
    epoch: usize,
}

fn checkpoint(model: &Model<f32>, adam: &AdamSlots, meta: CheckpointMeta) -> Checkpoint {
    let graph = model.to_graph();
    let mut slots = BTreeMap::new();
    for (name, m) in &adam.m {
        let shape = graph.tensors[name].shape.clone();
        slots.insert(format!("{name}{ADAM_M_SUFFIX}"), Tensor::f32(shape.clone(), m.clone()).training_only());
        slots.insert(format!("{name}{ADAM_V_SUFFIX}"), Tensor::f32(shape, adam.v[name].clone()).training_only());
    }
    Checkpoint { graph, optimizer_slots: slots, meta: CheckpointMeta { adam_step: adam.step, ..meta } }
}

/// Trains `graph` through the configured stages.
///
/// Each stage starts a fresh Adam state at its learning rate, monitors the
/// validation metrics after every epoch, and ends with the best epoch's
/// weights restored (when `restore_best` is set), so every stage begins from
/// the best checkpoint of the previous one. `on_best` sees a checkpoint at
/// every new best epoch. With a teacher, batches are trained on the
/// distillation objective from `cfg.kd`.
pub fn three_stage_train(
    graph: &Graph,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &TrainConfig,
    teacher: Option<&Graph>,
    on_best: &mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.check()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    let teacher = match teacher {
        Some(t) => Some(Session::new(t, ExecutionMode::Fp32)?),
        None => None,
    };
    let kd = cfg.kd.unwrap_or_default();
    let mut model = Model::<f32>::from_graph(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut history = TrainHistory::default();
    let mut data_epoch = 0;

    for (s, stage) in cfg.stages.iter().enumerate() {
        if stage.fake_quant && model.graph.count_kind("FakeQuant") == 0 {
            model = Model::from_graph(&insert_fake_quant(&model.to_graph()))?;
        }
        let pass = PassConfig::train(stage.frozen_backbone);
        let trainable = model.trainable(stage.frozen_backbone);
        let mut adam = AdamSlots::new(&model);
        let mut plateau = stage.plateau.map(|p| Plateau::new(p, stage.learning_rate));
        let mut stopper = EarlyStopping::new(stage.early_stop);
        let mut best: Option<Snapshot> = None;
        let mut lr = stage.learning_rate;

        for epoch in 1..=stage.max_epochs {
            let (mut loss_sum, mut seen) = (0.0f64, 0usize);
            for (x, labels) in train.train_batches(cfg.batch_size, cfg.seed, data_epoch, cfg.augment.as_ref()) {
                let teacher_logits: Option<Activation<f32>> = match &teacher {
                    Some(t) => Some(t.run(&x)?.logits),
                    None => None,
                };
                let objective = match &teacher_logits {
                    Some(z) => Objective::Distill { teacher_logits: z, cfg: kd },
                    None => Objective::CrossEntropy,
                };
                let step = forward_backward(&mut model, &x, &labels, &objective, &pass, &mut rng)?;
                loss_sum += step.loss as f64 * labels.len() as f64;
                seen += labels.len();
                adam.step += 1;
                for name in &trainable {
                    let g = &step.grads[name];
                    let p = model.params.get_mut(name).unwrap();
                    adam_step(p, g, adam.m.get_mut(name).unwrap(), adam.v.get_mut(name).unwrap(), adam.step, lr, &cfg.adam);
                }
            }
            data_epoch += 1;
            let (val_loss, val_accuracy, _) = evaluate(&mut model, val, cfg.batch_size)?;
            history.epochs.push(EpochRecord {
                stage: s + 1,
                epoch,
                train_loss: loss_sum / seen as f64,
                val_loss,
                val_accuracy,
                learning_rate: lr,
            });
            let monitored = |m: Monitor| if m == Monitor::ValLoss { val_loss } else { val_accuracy };
            let verdict = stopper.update(monitored(stage.early_stop.monitor));
            if verdict.improved {
                best = Some(Snapshot {
                    params: model.params.clone(),
                    m: adam.m.clone(),
                    v: adam.v.clone(),
                    step: adam.step,
                    epoch,
                });
                on_best(&checkpoint(&model, &adam, CheckpointMeta { stage: s + 1, epoch, seed: cfg.seed, adam_step: 0 }))?;
            }
            if let Some(p) = plateau.as_mut() {
                lr = p.update(monitored(p.policy.monitor));
            }
            if verdict.stop {
                break;
            }
        }

        let stage_start = history.epochs.len() - history.stage(s + 1).count();
        let kept = match best.filter(|_| stage.early_stop.restore_best) {
            Some(b) => {
                model.params = b.params;
                (adam.m, adam.v, adam.step) = (b.m, b.v, b.step);
                b.epoch
            }
            None => history.stage(s + 1).count(),
        };
        history.stage_best.push(stopper.best_epoch.unwrap_or(1));
        history.best_index = stage_start + kept - 1;
        if s + 1 == cfg.stages.len() {
            let rec = history.best().clone();
            let meta = CheckpointMeta { stage: rec.stage, epoch: rec.epoch, seed: cfg.seed, adam_step: 0 };
            return Ok(TrainOutcome { checkpoint: checkpoint(&model, &adam, meta), history });
        }
    }
    unreachable!("stages are non-empty")
}
