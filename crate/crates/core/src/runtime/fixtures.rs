//! Forward-pass fixtures: recorded inputs and the logits some other
//! implementation produced for them, stored as JSON next to a TMF file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, ExecError, Session};
use crate::model::Graph;

/// Largest tolerated absolute logit difference against recorded fixtures.
pub const FIXTURE_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    /// `[h, w, c]` of one input.
    pub input_shape: [usize; 3],
    /// One flattened NHWC image per fixture.
    pub inputs: Vec<Vec<f32>>,
    /// Logits recorded for each input.
    pub logits: Vec<Vec<f32>>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture file: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixtures are malformed: {0}")]
    Malformed(String),
    #[error("fixtures are for {fixtures:?} inputs but the model takes {model:?}")]
    ShapeMismatch { fixtures: [usize; 3], model: [usize; 3] },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Per-fixture comparison against a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureCheck {
    pub count: usize,
    pub max_abs_diff: f32,
    pub per_fixture: Vec<f32>,
}

impl FixtureCheck {
    pub fn passes(&self) -> bool {
        self.max_abs_diff <= FIXTURE_TOLERANCE
    }
}

impl Fixtures {
    /// Records `graph`'s own logits for `inputs`.
    pub fn record(graph: &Graph, inputs: Vec<Vec<f32>>) -> Result<Self, FixtureError> {
        let mut f = Fixtures { input_shape: graph.input_shape, inputs, logits: Vec::new() };
        f.check_inputs()?;
        let out = run(graph, &f)?;
        f.logits = out.data.chunks(out.shape[1]).map(<[f32]>::to_vec).collect();
        Ok(f)
    }

    pub fn from_json(s: &str) -> Result<Self, FixtureError> {
        let f: Fixtures = serde_json::from_str(s)?;
        f.check_inputs()?;
        if f.logits.len() != f.inputs.len() {
            return Err(FixtureError::Malformed(format!("{} inputs but {} logit rows", f.inputs.len(), f.logits.len())));
        }
        Ok(f)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        Fixtures::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fixtures always serialize")
    }

    /// Runs every fixture through `graph` and compares against the recorded logits.
    pub fn check(&self, graph: &Graph) -> Result<FixtureCheck, FixtureError> {
        if graph.input_shape != self.input_shape {
            return Err(FixtureError::ShapeMismatch { fixtures: self.input_shape, model: graph.input_shape });
        }
        let out = run(graph, self)?;
        let k = out.shape[1];
        let mut per_fixture = Vec::with_capacity(self.inputs.len());
        for (got, want) in out.data.chunks(k).zip(&self.logits) {
            if want.len() != k {
                return Err(FixtureError::Malformed(format!("recorded {} logits, model has {k} classes", want.len())));
            }
            per_fixture.push(got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max));
        }
        let max_abs_diff = per_fixture.iter().copied().fold(0.0, f32::max);
        Ok(FixtureCheck { count: per_fixture.len(), max_abs_diff, per_fixture })
    }

    fn check_inputs(&self) -> Result<(), FixtureError> {
        let n: usize = self.input_shape.iter().product();
        if self.inputs.is_empty() {
            return Err(FixtureError::Malformed("no inputs".into()));
        }
        if let Some(i) = self.inputs.iter().position(|x| x.len() != n) {
            return Err(FixtureError::Malformed(format!("input {i} has {} values, expected {n}", self.inputs[i].len())));
        }
        Ok(())
    }
}

fn run(graph: &Graph, f: &Fixtures) -> Result<Activation<f32>, FixtureError> {
    let [h, w, c] = f.input_shape;
    let batch = Activation::new(vec![f.inputs.len(), h, w, c], f.inputs.concat());
    Ok(Session::auto(graph)?.run(&batch)?.logits)
}
