// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching and attention aggregation.
//!
//! For a clean/corrupted pair the harness runs both prompts, then reruns
//! the corrupted prompt with one clean activation swapped in and scores
//!
//! ```text
//! metric = (patched_ld - corrupted_ld) / (clean_ld - corrupted_ld)
//! ```
//!
//! where `ld` is the logit of the clean answer minus the logit of the
//! corrupted answer at the last position. 1 means the clean answer is fully
//! restored, 0 means no change. Values outside `[0, 1]` are kept as is. A
//! pair whose baselines are closer than [`DEGENERATE_EPS`] contributes no
//! value to any cell; a cell with no contributions is `None` (JSON `null`).
//!
//! Residual grids patch `ResidualPre` at one `(layer, position)` at a time
//! and are bucketed by prompt length. Head grids patch one head's output at
//! every position at once.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::CounterfactualPair;
use crate::model::{ActivationSelector, ActivationTensor, InstrumentedModel, ModelError, ModelInfo};
use crate::num::Scalar;

/// Smallest usable `|clean_ld - corrupted_ld|`.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchingError {
    #[error("token id {id} outside logits of length {len}")]
    IdOutOfRange { id: u32, len: usize },
    #[error("clean and corrupted logit differences are indistinguishable ({clean} vs {corrupted})")]
    DegenerateBaseline { clean: f64, corrupted: f64 },
    #[error("no pairs given")]
    EmptyPairSet,
    #[error("pair {index}: {clean_tokens} clean tokens vs {corrupted_tokens} corrupted tokens")]
    MisalignedPair { index: usize, clean_tokens: usize, corrupted_tokens: usize },
    #[error("pair {index}: answer {answer:?} is not a single token")]
    AnswerNotSingleToken { index: usize, answer: String },
    #[error("k = {k} exceeds the {cells} valid cells")]
    KExceedsCells { k: usize, cells: usize },
    #[error("expected a {expected:?} grid")]
    WrongAxis { expected: AxisKind },
    #[error("no heads given")]
    NoHeads,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `logits[clean_id] - logits[corrupted_id]`.
pub fn logit_diff<S: Scalar>(final_logits: &[f32], clean_id: u32, corrupted_id: u32) -> Result<S, PatchingError> {
    let get = |id: u32| {
        final_logits.get(id as usize).copied().ok_or(PatchingError::IdOutOfRange { id, len: final_logits.len() })
    };
    Ok(S::of_f32(get(clean_id)?) - S::of_f32(get(corrupted_id)?))
}

/// Normalized restoration, unclamped.
pub fn patching_metric<S: Scalar>(patched_ld: S, clean_ld: S, corrupted_ld: S) -> Result<S, PatchingError> {
    let denom = clean_ld - corrupted_ld;
    if denom.abs() < S::lit(DEGENERATE_EPS) {
        return Err(PatchingError::DegenerateBaseline {
            clean: clean_ld.to_f64().unwrap_or(f64::NAN),
            corrupted: corrupted_ld.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok((patched_ld - corrupted_ld) / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    /// Rows are layers, columns are token positions.
    LayerByPosition,
    /// Rows are layers, columns are heads.
    LayerByHead,
}

/// An averaged patching grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct PatchGrid<S> {
    pub axis_kind: AxisKind,
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<Option<S>>,
    /// Mean clean logit difference over the pairs.
    pub clean_ld: S,
    pub corrupted_ld: S,
    pub pair_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_labels: Option<Vec<String>>,
}

impl<S: Scalar> PatchGrid<S> {
    pub fn get(&self, row: usize, col: usize) -> Option<S> {
        if row < self.rows && col < self.cols {
            self.grid[row * self.cols + col]
        } else {
            None
        }
    }

    /// Cell with the largest value; the first in row-major order wins ties.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, S)> = None;
        for (i, v) in self.grid.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| (i / self.cols, i % self.cols))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Lists broken shape and value invariants.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.grid.len() != self.rows * self.cols {
            out.push(format!("grid has {} cells, expected {}x{}", self.grid.len(), self.rows, self.cols));
        }
        if self.pair_count == 0 {
            out.push("pair_count is 0".into());
        }
        if self.grid.iter().flatten().any(|v| !v.is_finite()) {
            out.push("non-finite cell".into());
        }
        if let Some(l) = &self.token_labels {
            if self.axis_kind != AxisKind::LayerByPosition || l.len() != self.cols {
                out.push("token labels do not match the position axis".into());
            }
        }
        out
    }
}

/// Ids of one pair, checked for alignment and single-token answers.
#[derive(Clone, Debug)]
struct PreparedPair {
    clean: Vec<u32>,
    corrupted: Vec<u32>,
    clean_answer: u32,
    corrupted_answer: u32,
}

fn prepare<M: InstrumentedModel + ?Sized>(model: &M, pairs: &[CounterfactualPair]) -> Result<Vec<PreparedPair>, PatchingError> {
    if pairs.is_empty() {
        return Err(PatchingError::EmptyPairSet);
    }
    pairs
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let clean = model.tokenize(&p.clean.prompt)?;
            let corrupted = model.tokenize(&p.corrupted.prompt)?;
            if clean.len() != corrupted.len() {
                return Err(PatchingError::MisalignedPair {
                    index,
                    clean_tokens: clean.len(),
                    corrupted_tokens: corrupted.len(),
                });
            }
            let single = |answer: &str| -> Result<u32, PatchingError> {
                match model.tokenize(answer)?.as_slice() {
                    [id] => Ok(*id),
                    _ => Err(PatchingError::AnswerNotSingleToken { index, answer: answer.to_owned() }),
                }
            };
            Ok(PreparedPair {
                clean_answer: single(&p.clean_answer)?,
                corrupted_answer: single(&p.corrupted_answer)?,
                clean,
                corrupted,
            })
        })
        .collect()
}

/// Per-pair cells plus the two baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrid<S> {
    pub cells: Vec<Option<S>>,
    pub clean_ld: S,
    pub corrupted_ld: S,
}

fn pair_grid<S: Scalar, M: InstrumentedModel + ?Sized>(
    model: &M,
    pair: &PreparedPair,
    capture: &[ActivationSelector],
    cells: &[Vec<usize>],
    patch_for: impl Fn(&ActivationTensor, &[usize]) -> Option<ActivationTensor> + Sync,
) -> Result<PairGrid<S>, PatchingError> {
    let ld = |logits: &[f32]| logit_diff::<S>(logits, pair.clean_answer, pair.corrupted_answer);
    let clean_run = model.forward(&pair.clean, capture)?;
    let clean_ld = ld(&clean_run.final_logits)?;
    let corrupted_ld = ld(&model.forward(&pair.corrupted, &[])?.final_logits)?;
    if patching_metric(clean_ld, clean_ld, corrupted_ld).is_err() {
        return Ok(PairGrid { cells: vec![None; cells.len()], clean_ld, corrupted_ld });
    }
    let cells = cells
        .par_iter()
        .map(|cell| -> Result<Option<S>, PatchingError> {
            let patches: Vec<ActivationTensor> =
                clean_run.captured.iter().filter_map(|t| patch_for(t, cell)).collect();
            let out = model.forward_with_patch(&pair.corrupted, &patches)?;
            Ok(patching_metric(ld(&out.final_logits)?, clean_ld, corrupted_ld).ok())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PairGrid { cells, clean_ld, corrupted_ld })
}

// Cell-wise mean over the pairs that produced a value, summed in pair order.
fn average<S: Scalar>(grids: &[PairGrid<S>]) -> (Vec<Option<S>>, S, S) {
    let n = grids[0].cells.len();
    let mut sums = vec![S::zero(); n];
    let mut counts = vec![0usize; n];
    let (mut clean, mut corrupted) = (S::zero(), S::zero());
    for g in grids {
        clean = clean + g.clean_ld;
        corrupted = corrupted + g.corrupted_ld;
        for (i, c) in g.cells.iter().enumerate() {
            if let Some(v) = c {
                sums[i] = sums[i] + *v;
                counts[i] += 1;
            }
        }
    }
    let k = S::lit(grids.len() as f64);
    let cells = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / S::lit(c as f64)))
        .collect();
    (cells, clean / k, corrupted / k)
}

fn residual_setup(info: &ModelInfo, len: usize) -> (Vec<ActivationSelector>, Vec<Vec<usize>>) {
    let capture = (0..info.num_layers).map(|l| ActivationSelector::residual(l, None)).collect();
    let cells = (0..info.num_layers).flat_map(|l| (0..len).map(move |p| vec![l, p])).collect();
    (capture, cells)
}

fn residual_patch(t: &ActivationTensor, cell: &[usize]) -> Option<ActivationTensor> {
    (t.selector.layer == cell[0]).then(|| t.select_position(cell[1])).flatten()
}

/// Per-pair residual grids (rows = layers, cols = positions), without
/// averaging. Exposed for checking that averaging commutes.
pub fn residual_pair_grids<S: Scalar, M: InstrumentedModel + ?Sized>(
    model: &M,
    pairs: &[CounterfactualPair],
) -> Result<Vec<PairGrid<S>>, PatchingError> {
    let info = model.info()?;
    let prepared = prepare(model, pairs)?;
    prepared
        .par_iter()
        .map(|p| {
            let (capture, cells) = residual_setup(&info, p.clean.len());
            pair_grid(model, p, &capture, &cells, residual_patch)
        })
        .collect()
}

/// Layer x position grids, one per distinct prompt length, shortest first.
pub fn run_residual_patch_grid<S: Scalar, M: InstrumentedModel + ?Sized>(
    model: &M,
    pairs: &[CounterfactualPair],
) -> Result<Vec<PatchGrid<S>>, PatchingError> {
    let info = model.info()?;
    let prepared = prepare(model, pairs)?;
    let mut buckets: BTreeMap<usize, Vec<&PreparedPair>> = BTreeMap::new();
    for p in &prepared {
        buckets.entry(p.clean.len()).or_default().push(p);
    }
    buckets
        .into_iter()
        .map(|(len, group)| {
            let (capture, cells) = residual_setup(&info, len);
            let grids = group
                .par_iter()
                .map(|p| pair_grid(model, p, &capture, &cells, residual_patch))
                .collect::<Result<Vec<PairGrid<S>>, _>>()?;
            let (grid, clean_ld, corrupted_ld) = average(&grids);
            let labels =
                group[0].clean.iter().map(|&id| model.detokenize(&[id])).collect::<Result<Vec<_>, _>>()?;
            Ok(PatchGrid {
                axis_kind: AxisKind::LayerByPosition,
                rows: info.num_layers,
                cols: len,
                grid,
                clean_ld,
                corrupted_ld,
                pair_count: group.len(),
                token_labels: Some(labels),
            })
        })
        .collect()
}

/// Layer x head grid; each cell patches one head's output at all positions.
pub fn run_head_patch_grid<S: Scalar, M: InstrumentedModel + ?Sized>(
    model: &M,
    pairs: &[CounterfactualPair],
) -> Result<PatchGrid<S>, PatchingError> {
    let info = model.info()?;
    let prepared = prepare(model, pairs)?;
    let capture: Vec<ActivationSelector> = (0..info.num_layers)
        .flat_map(|l| (0..info.num_heads).map(move |h| ActivationSelector::head_output(l, h, None)))
        .collect();
    let cells: Vec<Vec<usize>> =
        (0..info.num_layers).flat_map(|l| (0..info.num_heads).map(move |h| vec![l, h])).collect();
    let patch = |t: &ActivationTensor, cell: &[usize]| {
        (t.selector.layer == cell[0] && t.selector.head == Some(cell[1])).then(|| t.clone())
    };
    let grids = prepared
        .par_iter()
        .map(|p| pair_grid(model, p, &capture, &cells, patch))
        .collect::<Result<Vec<PairGrid<S>>, _>>()?;
    let (grid, clean_ld, corrupted_ld) = average(&grids);
    Ok(PatchGrid {
        axis_kind: AxisKind::LayerByHead,
        rows: info.num_layers,
        cols: info.num_heads,
        grid,
        clean_ld,
        corrupted_ld,
        pair_count: prepared.len(),
        token_labels: None,
    })
}

/// The `k` heads with the largest `|metric|`, descending, ties broken by
/// `(layer, head)`. Null cells are never selected.
pub fn top_k_heads<S: Scalar>(result: &PatchGrid<S>, k: usize) -> Result<Vec<(usize, usize, S)>, PatchingError> {
    if result.axis_kind != AxisKind::LayerByHead {
        return Err(PatchingError::WrongAxis { expected: AxisKind::LayerByHead });
    }
    let mut cells: Vec<(usize, usize, S)> = result
        .grid
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i / result.cols, i % result.cols, v)))
        .collect();
    if k > cells.len() {
        return Err(PatchingError::KExceedsCells { k, cells: cells.len() });
    }
    cells.sort_by(|a, b| {
        b.2.abs().partial_cmp(&a.2.abs()).unwrap_or(std::cmp::Ordering::Equal).then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    cells.truncate(k);
    Ok(cells)
}

/// Mean final-position attention row over a set of heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AttentionProfile<S> {
    pub heads: Vec<(usize, usize)>,
    pub token_labels: Vec<String>,
    pub weights: Vec<S>,
}

impl<S: Scalar> AttentionProfile<S> {
    pub fn total(&self) -> S {
        self.weights.iter().fold(S::zero(), |a, &w| a + w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Averages each head's attention row at the final query position.
pub fn aggregate_attention<S: Scalar, M: InstrumentedModel + ?Sized>(
    model: &M,
    ids: &[u32],
    heads: &[(usize, usize)],
) -> Result<AttentionProfile<S>, PatchingError> {
    if heads.is_empty() {
        return Err(PatchingError::NoHeads);
    }
    if ids.is_empty() {
        return Err(ModelError::EmptySequence.into());
    }
    let last = ids.len() - 1;
    let selectors: Vec<ActivationSelector> =
        heads.iter().map(|&(l, h)| ActivationSelector::attention(l, h, Some(last))).collect();
    let info = model.info()?;
    for s in &selectors {
        s.validate(&info, ids.len())?;
    }
    let out = model.forward(ids, &selectors)?;
    let mut sums = vec![S::zero(); ids.len()];
    for s in &selectors {
        let t = out.get(s).ok_or_else(|| ModelError::Protocol(format!("{s} was not captured")))?;
        if t.values.len() != ids.len() {
            return Err(ModelError::ShapeMismatch { selector: s.to_string(), expected: vec![ids.len()], got: t.shape.clone() }.into());
        }
        for (acc, &v) in sums.iter_mut().zip(&t.values) {
            *acc = *acc + S::of_f32(v);
        }
    }
    let k = S::lit(heads.len() as f64);
    let token_labels = ids.iter().map(|&id| model.detokenize(&[id])).collect::<Result<Vec<_>, _>>()?;
    Ok(AttentionProfile { heads: heads.to_vec(), token_labels, weights: sums.into_iter().map(|s| s / k).collect() })
}
