// SPDX-License-Identifier: MIT OR Apache-2.0

//! Natural-language renderings of state-tracking problems and their exact
//! ground-truth oracles.
//!
//! Three domains are supported:
//!
//! - **Box tracking**: objects placed in lettered boxes and moved around;
//!   the prompt ends at "The glove is in the Box" and the answer is the box
//!   letter.
//! - **Abstract DFA**: a trajectory through a random automaton written as
//!   "Take action M, go to state b." sentences; the final target is left open.
//! - **Fruit store**: `n` people, `n` fruits, a few assignment/transfer clues;
//!   the answer is the set of fruits the queried person can still end up with.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfa::DfaError;

pub mod abstract_dfa;
pub mod box_tracking;
pub mod fruit;
pub mod words;

pub use abstract_dfa::{generate_abstract_dfa, render_abstract_dfa, render_prompt, DfaPromptReading};
pub use box_tracking::{box_oracle, render_box_tracking, BoxMove, BoxWorld};
pub use fruit::{fruit_oracle, render_fruit_store, Clue, FruitWorld, CLUE_RETRY_BUDGET};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("a move was requested but no object can move (only one box)")]
    NoValidMove,
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("unknown person `{0}`")]
    UnknownPerson(String),
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("no satisfiable clue set after {attempts} attempts")]
    UnsatisfiableClues { attempts: usize },
    #[error("completion is empty after trimming")]
    UnparseableCompletion,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dfa(#[from] DfaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    BoxTracking,
    AbstractDfa,
    FruitStore,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::BoxTracking => "box_tracking",
            Domain::AbstractDfa => "abstract_dfa",
            Domain::FruitStore => "fruit_store",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box_tracking" | "box" => Ok(Domain::BoxTracking),
            "abstract_dfa" | "dfa" => Ok(Domain::AbstractDfa),
            "fruit_store" | "fruit" => Ok(Domain::FruitStore),
            other => Err(format!("unknown domain `{other}` (box_tracking, abstract_dfa, fruit_store)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    SingleToken,
    FeasibleSet,
}

/// Expected answer of a task instance.
///
/// Single-token answers carry their leading space (`" b"`, `" B"`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AnswerSpec {
    SingleToken(String),
    FeasibleSet(Vec<String>),
}

impl AnswerSpec {
    pub fn kind(&self) -> AnswerKind {
        match self {
            AnswerSpec::SingleToken(_) => AnswerKind::SingleToken,
            AnswerSpec::FeasibleSet(_) => AnswerKind::FeasibleSet,
        }
    }

    /// The answer as a completion string, e.g. `" b"` or `" grape, apple, pear"`.
    pub fn completion(&self) -> String {
        match self {
            AnswerSpec::SingleToken(v) => v.clone(),
            AnswerSpec::FeasibleSet(items) => format!(" {}", items.join(", ")),
        }
    }

    pub fn single_token(&self) -> Option<&str> {
        match self {
            AnswerSpec::SingleToken(v) => Some(v),
            AnswerSpec::FeasibleSet(_) => None,
        }
    }

    /// Violations of the answer invariants (non-empty, duplicate-free).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            AnswerSpec::SingleToken(v) if v.trim().is_empty() => out.push("single-token answer is empty".to_owned()),
            AnswerSpec::FeasibleSet(items) => {
                if items.is_empty() {
                    out.push("feasible set is empty".to_owned());
                }
                let mut seen = std::collections::BTreeSet::new();
                for i in items {
                    if !seen.insert(i) {
                        out.push(format!("feasible set repeats `{i}`"));
                    }
                }
            }
            _ => {}
        }
        out
    }
}

/// Generation parameters recorded with each instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    /// Boxes, automaton states, or people.
    pub num_states: usize,
    /// Moves, trajectory steps, or (fruit) zero.
    pub num_transitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_objects: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_clues: Option<usize>,
    pub seed: u64,
    pub queried_entity: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub domain: Domain,
    pub prompt: String,
    pub answer: AnswerSpec,
    pub meta: TaskMeta,
}

impl TaskInstance {
    pub fn to_record(&self, id: impl Into<String>) -> TaskRecord {
        let answer = match &self.answer {
            AnswerSpec::SingleToken(v) => serde_json::Value::String(v.clone()),
            AnswerSpec::FeasibleSet(items) => serde_json::Value::from(items.clone()),
        };
        TaskRecord {
            id: id.into(),
            domain: self.domain,
            prompt: self.prompt.clone(),
            answer_kind: self.answer.kind(),
            answer,
            meta: self.meta.clone(),
        }
    }
}

/// One line of a dataset file. Field order is fixed so files are byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub domain: Domain,
    pub prompt: String,
    pub answer_kind: AnswerKind,
    pub answer: serde_json::Value,
    pub meta: TaskMeta,
}

impl TaskRecord {
    pub fn to_instance(&self) -> Result<TaskInstance, String> {
        let answer = match self.answer_kind {
            AnswerKind::SingleToken => {
                AnswerSpec::SingleToken(self.answer.as_str().ok_or("answer is not a string")?.to_owned())
            }
            AnswerKind::FeasibleSet => AnswerSpec::FeasibleSet(
                serde_json::from_value(self.answer.clone()).map_err(|e| format!("answer: {e}"))?,
            ),
        };
        Ok(TaskInstance { domain: self.domain, prompt: self.prompt.clone(), answer, meta: self.meta.clone() })
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a model completion into the domain's answer shape.
///
/// Box and DFA completions keep the first whitespace-delimited token,
/// stripped of punctuation and given a leading space. Fruit completions are
/// read as a comma-separated list up to the first period or newline,
/// lowercased, duplicates dropped.
pub fn parse_answer(domain: Domain, completion: &str) -> Result<AnswerSpec, TaskError> {
    match domain {
        Domain::BoxTracking | Domain::AbstractDfa => {
            let first = completion.split_whitespace().next().ok_or(TaskError::UnparseableCompletion)?;
            let core = first.trim_matches(|c: char| !c.is_alphanumeric());
            if core.is_empty() {
                return Err(TaskError::UnparseableCompletion);
            }
            Ok(AnswerSpec::SingleToken(format!(" {core}")))
        }
        Domain::FruitStore => {
            let body = completion.split(['.', '\n']).next().unwrap_or("");
            let mut items: Vec<String> = Vec::new();
            for piece in body.split(',') {
                let item = piece.trim().to_lowercase();
                if !item.is_empty() && !items.contains(&item) {
                    items.push(item);
                }
            }
            if items.is_empty() {
                return Err(TaskError::UnparseableCompletion);
            }
            Ok(AnswerSpec::FeasibleSet(items))
        }
    }
}
