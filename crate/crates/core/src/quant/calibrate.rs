use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::model::{Graph, Op};
use crate::runtime::{Activation, Session};

/// Running min/max of every activation edge, keyed by producing node name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub count: usize,
    pub ranges: BTreeMap<String, [f32; 2]>,
}

impl CalibrationStats {
    pub fn observe(&mut self, name: &str, values: &[f32]) {
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let r = self.ranges.entry(name.to_string()).or_insert([lo, hi]);
        r[0] = r[0].min(lo);
        r[1] = r[1].max(hi);
    }

    pub fn range(&self, name: &str) -> Option<[f32; 2]> {
        self.ranges.get(name).copied()
    }
}

/// Runs up to `n` samples through the float graph, one batch at a time in
/// source order, recording every node's output range except the final softmax.
pub fn calibrate<I>(graph: &Graph, samples: I, n: usize) -> Result<CalibrationStats, QuantError>
where
    I: IntoIterator<Item = Activation<f32>>,
{
    let session = Session::auto(graph)?;
    let mut stats = CalibrationStats::default();
    for batch in samples {
        if stats.count >= n {
            break;
        }
        let take = batch.batch().min(n - stats.count);
        let batch = if take < batch.batch() {
            Activation::new(
                [vec![take], batch.shape[1..].to_vec()].concat(),
                batch.data[..take * batch.sample_len()].to_vec(),
            )
        } else {
            batch
        };
        session.run_observed(&batch, &mut |node, out| {
            if !matches!(node.op, Op::Softmax) {
                stats.observe(&node.name, &out.data);
            }
        })?;
        stats.count += take;
    }
    if stats.count == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    Ok(stats)
}
