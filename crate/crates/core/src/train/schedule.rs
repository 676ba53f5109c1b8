//! Learning-rate reduction on plateau and early stopping, as stateful
//! per-epoch trackers plus pure functions over whole metric traces.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
}

impl Monitor {
    /// Whether larger values are better.
    pub fn maximize(self) -> bool {
        matches!(self, Monitor::ValAccuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauPolicy {
    pub factor: f64,
    pub patience: usize,
    #[serde(default = "default_plateau_monitor")]
    pub monitor: Monitor,
    /// Minimum change that counts as an improvement.
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
}

fn default_plateau_monitor() -> Monitor {
    Monitor::ValLoss
}

fn default_min_delta() -> f64 {
    1e-4
}

impl PlateauPolicy {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauPolicy { factor, patience, monitor: Monitor::ValLoss, min_delta: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopPolicy {
    pub patience: usize,
    #[serde(default = "default_stop_monitor")]
    pub monitor: Monitor,
    #[serde(default = "default_true")]
    pub restore_best: bool,
}

fn default_stop_monitor() -> Monitor {
    Monitor::ValAccuracy
}

fn default_true() -> bool {
    true
}

impl EarlyStopPolicy {
    pub fn new(patience: usize) -> Self {
        EarlyStopPolicy { patience, monitor: Monitor::ValAccuracy, restore_best: true }
    }
}

fn improves(current: f64, best: Option<f64>, maximize: bool, min_delta: f64) -> bool {
    match best {
        None => true,
        Some(b) if maximize => current > b + min_delta,
        Some(b) => current < b - min_delta,
    }
}

/// Counts epochs without improvement and scales the learning rate once the
/// count reaches `patience`, then starts counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub policy: PlateauPolicy,
    pub lr: f64,
    best: Option<f64>,
    wait: usize,
}

impl Plateau {
    pub fn new(policy: PlateauPolicy, lr: f64) -> Self {
        Plateau { policy, lr, best: None, wait: 0 }
    }

    /// Records one epoch's metric; returns the learning rate for the next epoch.
    pub fn update(&mut self, metric: f64) -> f64 {
        let p = &self.policy;
        if improves(metric, self.best, p.monitor.maximize(), p.min_delta) {
            self.best = Some(metric);
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= p.patience {
                self.lr *= p.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Learning rate in effect during each epoch of a metric trace.
pub fn plateau_trace(metrics: &[f64], lr: f64, policy: PlateauPolicy) -> Vec<f64> {
    let mut p = Plateau::new(policy, lr);
    let mut out = Vec::with_capacity(metrics.len());
    for &m in metrics {
        out.push(p.lr);
        p.update(m);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub policy: EarlyStopPolicy,
    best: Option<f64>,
    /// 1-based epoch of the best metric so far.
    pub best_epoch: Option<usize>,
    wait: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochVerdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(policy: EarlyStopPolicy) -> Self {
        EarlyStopping { policy, best: None, best_epoch: None, wait: 0, epoch: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn update(&mut self, metric: f64) -> EpochVerdict {
        self.epoch += 1;
        let improved = improves(metric, self.best, self.policy.monitor.maximize(), 0.0);
        if improved {
            self.best = Some(metric);
            self.best_epoch = Some(self.epoch);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        EpochVerdict { improved, stop: self.wait >= self.policy.patience }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopOutcome {
    /// 1-based epoch whose weights are kept.
    pub best_epoch: usize,
    /// 1-based epoch after which training halted, if it halted early.
    pub stopped_after: Option<usize>,
}

/// Runs early stopping over a metric trace.
pub fn early_stop_trace(metrics: &[f64], policy: EarlyStopPolicy) -> StopOutcome {
    let mut es = EarlyStopping::new(policy);
    for (i, &m) in metrics.iter().enumerate() {
        if es.update(m).stop {
            return StopOutcome { best_epoch: es.best_epoch.unwrap_or(1), stopped_after: Some(i + 1) };
        }
    }
    StopOutcome { best_epoch: es.best_epoch.unwrap_or(1), stopped_after: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_fires_after_epoch_six() {
        let lrs = plateau_trace(&[1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9], 1.0, PlateauPolicy::new(0.5, 4));
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn improving_sequence_keeps_lr() {
        let metrics: Vec<f64> = (0..20).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert!(plateau_trace(&metrics, 1e-3, PlateauPolicy::new(0.5, 4)).iter().all(|&lr| lr == 1e-3));
    }

    #[test]
    fn sub_threshold_gains_do_not_count() {
        let lrs = plateau_trace(&[1.0, 0.99995, 0.99993, 0.99991, 0.99992, 0.5], 1.0, PlateauPolicy::new(0.5, 4));
        assert_eq!(lrs[5], 0.5);
    }

    #[test]
    fn early_stop_best_four_stop_eight() {
        let acc = [0.70, 0.75, 0.79, 0.8098, 0.80, 0.805, 0.79, 0.8098, 0.85];
        let out = early_stop_trace(&acc, EarlyStopPolicy::new(4));
        assert_eq!(out, StopOutcome { best_epoch: 4, stopped_after: Some(8) });
    }

    #[test]
    fn continuous_improvement_never_stops() {
        let acc: Vec<f64> = (0..15).map(|i| i as f64 / 15.0).collect();
        assert_eq!(early_stop_trace(&acc, EarlyStopPolicy::new(4)).stopped_after, None);
    }
}
