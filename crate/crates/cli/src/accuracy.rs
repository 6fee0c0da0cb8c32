// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets and accuracy grids over the configured axes.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statetrack::model::{greedy_generate, InstrumentedModel, ModelError};
use statetrack::rng::derive_seed;
use statetrack::tasks::{
    generate_abstract_dfa, parse_answer, render_box_tracking, render_fruit_store, AnswerSpec, TaskError, TaskRecord,
};
use statetrack::{Dfa, Domain, TaskInstance};

use crate::backend::Backend;
use crate::config::{ExperimentConfig, GridAxes};
use crate::RunError;

fn domain_tag(domain: Domain) -> u64 {
    match domain {
        Domain::BoxTracking => 0,
        Domain::AbstractDfa => 1,
        Domain::FruitStore => 2,
    }
}

/// Axis names for a domain: boxes x moves, states x transitions, people x clues.
pub fn axis_labels(domain: Domain) -> (&'static str, &'static str) {
    match domain {
        Domain::BoxTracking => ("boxes", "moves"),
        Domain::AbstractDfa => ("states", "transitions"),
        Domain::FruitStore => ("people", "clues"),
    }
}

/// Sample `index` of the cell `(row, col)`, with its automaton for DFA tasks.
pub fn cell_instance(
    config: &ExperimentConfig,
    row: usize,
    col: usize,
    index: usize,
) -> Result<(TaskInstance, Option<Dfa>), TaskError> {
    let seed = derive_seed(config.seed, &[domain_tag(config.domain), row as u64, col as u64, index as u64]);
    match config.domain {
        Domain::AbstractDfa => {
            let alphabet = config.alphabet_size.unwrap_or(row);
            let (dfa, _, inst) = generate_abstract_dfa(row, alphabet, config.density, col, seed)?;
            Ok((inst, Some(dfa)))
        }
        Domain::BoxTracking => Ok((render_box_tracking(row, config.num_objects, col, seed)?.1, None)),
        Domain::FruitStore => Ok((render_fruit_store(row, col, seed)?.1, None)),
    }
}

fn sample_id(row: usize, col: usize, index: usize) -> String {
    format!("r{row}_c{col}_{index}")
}

/// `(row, col)` pairs in row-major order.
fn cells(axes: &GridAxes) -> Vec<(usize, usize)> {
    axes.rows().iter().flat_map(|&r| axes.cols().iter().map(move |&c| (r, c))).collect()
}

/// One dataset line: the instance plus its automaton for DFA tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub task: TaskRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dfa: Option<Dfa>,
}

/// Every instance of the grid; infeasible cells contribute nothing and are
/// listed in the second return value.
pub fn generate_dataset(config: &ExperimentConfig) -> (Vec<DatasetRecord>, Vec<String>) {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (row, col) in cells(&config.axes()) {
        for i in 0..config.samples_per_cell {
            match cell_instance(config, row, col, i) {
                Ok((inst, dfa)) => records.push(DatasetRecord { task: inst.to_record(sample_id(row, col, i)), dfa }),
                Err(e) => {
                    skipped.push(format!("cell ({row}, {col}): {e}"));
                    break;
                }
            }
        }
    }
    (records, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub row: usize,
    pub col: usize,
    pub requested: usize,
    /// Samples that produced a completion.
    pub completed: usize,
    pub correct: usize,
    /// `correct / completed`; null when nothing completed.
    pub accuracy: Option<f64>,
    /// Mean set overlap (fruit store only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed_accuracy: Option<f64>,
    /// Why the cell has no instances, when its parameters are infeasible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub domain: Domain,
    pub row_axis: String,
    pub col_axis: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub samples_per_cell: usize,
    /// Row-major.
    pub cells: Vec<AccuracyCell>,
}

impl AccuracyGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<&AccuracyCell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    /// True when some feasible cell lost samples to errors.
    pub fn is_partial(&self) -> bool {
        self.cells.iter().any(|c| c.skipped.is_none() && c.completed < c.requested)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    /// Broken grid invariants; empty when consistent.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cells.len() != self.rows.len() * self.cols.len() {
            out.push(format!("{} cells for a {}x{} grid", self.cells.len(), self.rows.len(), self.cols.len()));
        }
        for c in &self.cells {
            let expected = (c.completed > 0).then(|| c.correct as f64 / c.completed as f64);
            if c.accuracy != expected {
                out.push(format!("cell ({}, {}): accuracy {:?} != {:?}", c.row, c.col, c.accuracy, expected));
            }
            if c.correct > c.completed || c.completed > c.requested {
                out.push(format!("cell ({}, {}): inconsistent counts", c.row, c.col));
            }
            if let Some(r) = c.relaxed_accuracy {
                if !(0.0..=1.0).contains(&r) {
                    out.push(format!("cell ({}, {}): relaxed accuracy {r} out of range", c.row, c.col));
                }
            }
        }
        out
    }
}

/// One evaluated prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub index: usize,
    pub prompt: String,
    pub expected: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AccuracyRun {
    pub grid: AccuracyGrid,
    pub samples: Vec<SampleRecord>,
}

/// `|p ∩ t| / |p ∪ t|`.
pub fn set_overlap(predicted: &[String], truth: &[String]) -> f64 {
    let p: BTreeSet<&String> = predicted.iter().collect();
    let t: BTreeSet<&String> = truth.iter().collect();
    let union = p.union(&t).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&t).count() as f64 / union as f64
}

/// Exact-match verdict and relaxed credit of a completion.
pub fn score(domain: Domain, expected: &AnswerSpec, completion: &str) -> (Option<AnswerSpec>, bool, Option<f64>) {
    let parsed = parse_answer(domain, completion).ok();
    match (expected, &parsed) {
        (AnswerSpec::FeasibleSet(truth), Some(AnswerSpec::FeasibleSet(pred))) => {
            let exact = pred.iter().collect::<BTreeSet<_>>() == truth.iter().collect::<BTreeSet<_>>();
            (parsed.clone(), exact, Some(set_overlap(pred, truth)))
        }
        (AnswerSpec::FeasibleSet(_), _) => (parsed, false, Some(0.0)),
        (AnswerSpec::SingleToken(t), Some(AnswerSpec::SingleToken(p))) => {
            let ok = t == p;
            (parsed, ok, None)
        }
        (AnswerSpec::SingleToken(_), _) => (parsed, false, None),
    }
}

fn answer_value(answer: &AnswerSpec) -> serde_json::Value {
    match answer {
        AnswerSpec::SingleToken(v) => serde_json::Value::String(v.clone()),
        AnswerSpec::FeasibleSet(items) => serde_json::Value::from(items.clone()),
    }
}

fn evaluate(
    model: &dyn InstrumentedModel,
    inst: &TaskInstance,
    max_new_tokens: usize,
) -> Result<(String, Option<AnswerSpec>, bool, Option<f64>), ModelError> {
    let ids = model.tokenize(&inst.prompt)?;
    let (_, text) = greedy_generate(model, &ids, max_new_tokens)?;
    let (parsed, correct, relaxed) = score(inst.domain, &inst.answer, &text);
    Ok((text, parsed, correct, relaxed))
}

enum Outcome {
    Skipped(String),
    Done(Box<SampleRecord>, Option<ModelError>),
}

/// Greedy-decodes every sample of every cell and scores it.
///
/// Samples run concurrently on at most `config.parallelism` threads; the
/// result does not depend on scheduling. Infeasible cells are reported as
/// skipped with null accuracy.
pub fn run_accuracy_grid(config: &ExperimentConfig, backend: &Backend) -> Result<AccuracyRun, RunError> {
    config.validate()?;
    let axes = config.axes();
    let jobs: Vec<(usize, usize, usize)> = cells(&axes)
        .into_iter()
        .flat_map(|(r, c)| (0..config.samples_per_cell).map(move |i| (r, c, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(row, col, index)| {
                let (inst, dfa) = match cell_instance(config, row, col, index) {
                    Ok(v) => v,
                    Err(e) => return Outcome::Skipped(e.to_string()),
                };
                let mut rec = SampleRecord {
                    id: sample_id(row, col, index),
                    row,
                    col,
                    index,
                    prompt: inst.prompt.clone(),
                    expected: answer_value(&inst.answer),
                    completion: None,
                    predicted: None,
                    correct: None,
                    relaxed: None,
                    error: None,
                };
                let result = backend.with_model(dfa.as_ref(), |m| Ok(evaluate(m, &inst, config.decode.max_new_tokens)));
                match result {
                    Ok(Ok((text, parsed, correct, relaxed))) => {
                        rec.completion = Some(text);
                        rec.predicted = parsed.as_ref().map(answer_value);
                        rec.correct = Some(correct);
                        rec.relaxed = relaxed;
                        Outcome::Done(Box::new(rec), None)
                    }
                    Ok(Err(e)) | Err(RunError::Model(e)) => {
                        rec.error = Some(e.to_string());
                        Outcome::Done(Box::new(rec), Some(e))
                    }
                    Err(e) => {
                        rec.error = Some(e.to_string());
                        Outcome::Done(Box::new(rec), Some(ModelError::Protocol(e.to_string())))
                    }
                }
            })
            .collect()
    });

    let completed_any = outcomes.iter().any(|o| matches!(o, Outcome::Done(r, None) if r.error.is_none()));
    if !completed_any {
        let unreachable = outcomes.iter().find_map(|o| match o {
            Outcome::Done(_, Some(e @ ModelError::EndpointUnreachable(_))) => Some(e.clone()),
            _ => None,
        });
        if let Some(e) = unreachable {
            return Err(e.into());
        }
    }

    let mut grid_cells = Vec::new();
    let mut samples = Vec::new();
    let mut it = outcomes.into_iter();
    for (row, col) in cells(&axes) {
        let mut cell = AccuracyCell {
            row,
            col,
            requested: config.samples_per_cell,
            completed: 0,
            correct: 0,
            accuracy: None,
            relaxed_accuracy: None,
            skipped: None,
        };
        let mut relaxed_sum = 0.0;
        let mut any_relaxed = false;
        for _ in 0..config.samples_per_cell {
            match it.next().expect("one outcome per job") {
                Outcome::Skipped(reason) => {
                    cell.skipped.get_or_insert(reason);
                }
                Outcome::Done(rec, err) => {
                    if err.is_none() {
                        cell.completed += 1;
                        cell.correct += usize::from(rec.correct == Some(true));
                        if let Some(r) = rec.relaxed {
                            relaxed_sum += r;
                            any_relaxed = true;
                        }
                    }
                    samples.push(*rec);
                }
            }
        }
        if cell.skipped.is_some() {
            // A cell is infeasible as a whole; drop any stray samples.
            samples.retain(|s| (s.row, s.col) != (row, col));
            cell.completed = 0;
            cell.correct = 0;
            any_relaxed = false;
        }
        if cell.completed > 0 {
            cell.accuracy = Some(cell.correct as f64 / cell.completed as f64);
            if any_relaxed {
                cell.relaxed_accuracy = Some(relaxed_sum / cell.completed as f64);
            }
        }
        grid_cells.push(cell);
    }
    let (row_axis, col_axis) = axis_labels(config.domain);
    Ok(AccuracyRun {
        grid: AccuracyGrid {
            domain: config.domain,
            row_axis: row_axis.into(),
            col_axis: col_axis.into(),
            rows: axes.rows().to_vec(),
            cols: axes.cols().to_vec(),
            samples_per_cell: config.samples_per_cell,
            cells: grid_cells,
        },
        samples,
    })
}
