//! Classification losses on logits, each returning the batch-mean value and
//! its gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::runtime::kernels::{softmax_row, Scalar};
use crate::runtime::Activation;

fn check_labels<F: Scalar>(logits: &Activation<F>, labels: &[usize]) -> Result<(usize, usize), TrainError> {
    let (n, k) = (logits.batch(), logits.channels());
    if labels.len() != n {
        return Err(TrainError::LabelCount { labels: labels.len(), batch: n });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(TrainError::LabelOutOfRange { label: y, classes: k });
    }
    Ok((n, k))
}

fn softmax_rows<F: Scalar>(logits: &[F], k: usize, t: F) -> Vec<F> {
    let mut p = logits.to_vec();
    p.chunks_mut(k).for_each(|r| softmax_row(r, t));
    p
}

/// `-log softmax(z)[y]` for one row, via log-sum-exp.
fn nll_row<F: Scalar>(z: &[F], y: usize) -> F {
    let max = z.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = z.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b).ln() + max;
    lse - z[y]
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<F: Scalar>(logits: &Activation<F>, labels: &[usize]) -> Result<(F, Activation<F>), TrainError> {
    let (n, k) = check_labels(logits, labels)?;
    let nf = F::from(n).unwrap();
    let mut loss = F::zero();
    let mut grad = softmax_rows(&logits.data, k, F::one());
    for (i, &y) in labels.iter().enumerate() {
        loss = loss + nll_row(&logits.data[i * k..(i + 1) * k], y);
        grad[i * k + y] = grad[i * k + y] - F::one();
    }
    grad.iter_mut().for_each(|g| *g = *g / nf);
    Ok((loss / nf, Activation::new(logits.shape.clone(), grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig { temperature: 4.0, alpha: 0.5 }
    }
}

impl KdConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if !(self.temperature > 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!(
                "distillation needs T > 0 and alpha in [0, 1], got T={} alpha={}",
                self.temperature, self.alpha
            )));
        }
        Ok(())
    }
}

/// `α·CE(y, softmax(z_s)) + (1−α)·T²·KL(softmax(z_t/T) ‖ softmax(z_s/T))`,
/// averaged over the batch. Teacher logits are constants.
pub fn kd_loss<F: Scalar>(
    student: &Activation<F>,
    teacher: &Activation<F>,
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<(F, Activation<F>), TrainError> {
    cfg.check()?;
    if student.shape != teacher.shape {
        return Err(TrainError::ClassCount { student: student.shape.clone(), teacher: teacher.shape.clone() });
    }
    let (n, k) = check_labels(student, labels)?;
    let (ce, ce_grad) = cross_entropy(student, labels)?;
    let t = F::from(cfg.temperature).unwrap();
    let alpha = F::from(cfg.alpha).unwrap();
    let nf = F::from(n).unwrap();
    let ps = softmax_rows(&student.data, k, t);
    let pt = softmax_rows(&teacher.data, k, t);
    let scaled = |z: &[F]| z.iter().map(|&v| v / t).collect::<Vec<F>>();
    let mut kl = F::zero();
    for i in 0..n {
        let r = i * k..(i + 1) * k;
        let (zs, zt) = (scaled(&student.data[r.clone()]), scaled(&teacher.data[r.clone()]));
        // KL(pt‖ps) = Σ pt (log pt − log ps), with log p = z/T − lse(z/T).
        for j in 0..k {
            let p = pt[i * k + j];
            if p > F::zero() {
                kl = kl + p * (nll_row(&zs, j) - nll_row(&zt, j));
            }
        }
    }
    let one = F::one();
    let soft_weight = (one - alpha) * t * t;
    let loss = alpha * ce + soft_weight * kl / nf;
    let grad = ce_grad
        .data
        .iter()
        .zip(ps.iter().zip(&pt))
        .map(|(&g, (&s, &q))| alpha * g + (one - alpha) * t * (s - q) / nf)
        .collect();
    Ok((loss, Activation::new(student.shape.clone(), grad)))
}
