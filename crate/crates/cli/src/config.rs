// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: a single JSON file, every field optional.
//! Precedence is command-line flags, then the file, then the defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statetrack::counterfactual::Scheme;
use statetrack::dfa::DEFAULT_DENSITY;
use statetrack::model::SyntheticConfig;
use statetrack::Domain;

use crate::RunError;

/// Endpoint value selecting the in-process synthetic model.
pub const SYNTHETIC: &str = "synthetic";

/// Axes of an accuracy grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridAxes {
    /// Box tracking (boxes x moves) and abstract DFA (states x transitions).
    States { states_axis: Vec<usize>, transitions_axis: Vec<usize> },
    /// Fruit store (people x clues).
    Fruit { n_axis: Vec<usize>, clues_axis: Vec<usize> },
}

impl GridAxes {
    pub fn default_for(domain: Domain) -> Self {
        match domain {
            Domain::FruitStore => GridAxes::Fruit { n_axis: vec![2, 3, 4, 5, 6, 8, 10, 15], clues_axis: vec![0, 1, 2, 3, 4] },
            _ => GridAxes::States {
                states_axis: vec![2, 3, 5, 10, 15, 26],
                transitions_axis: (1..=10).chain((20..=100).step_by(10)).collect(),
            },
        }
    }

    pub fn rows(&self) -> &[usize] {
        match self {
            GridAxes::States { states_axis, .. } => states_axis,
            GridAxes::Fruit { n_axis, .. } => n_axis,
        }
    }

    pub fn cols(&self) -> &[usize] {
        match self {
            GridAxes::States { transitions_axis, .. } => transitions_axis,
            GridAxes::Fruit { clues_axis, .. } => clues_axis,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Only greedy decoding is implemented.
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_new_tokens: 24, greedy: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchingConfig {
    /// Defaults to the box scheme for box tracking and the same-action
    /// scheme for DFAs.
    pub scheme: Option<Scheme>,
    pub pair_count: usize,
    pub num_states: usize,
    pub transitions: usize,
    pub noop_run_length: usize,
    pub num_boxes: usize,
    pub num_objects: usize,
    pub num_moves: usize,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        PatchingConfig {
            scheme: None,
            pair_count: 100,
            num_states: 5,
            transitions: 6,
            noop_run_length: 5,
            num_boxes: 3,
            num_objects: 3,
            num_moves: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub k: usize,
    /// Number of clean prompts from the pair file to summarize.
    pub prompts: usize,
    /// Heads to use instead of a prior head grid.
    pub heads: Option<Vec<(usize, usize)>>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { k: 5, prompts: 5, heads: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub domain: Domain,
    /// `None` means the domain's default axes.
    pub grid: Option<GridAxes>,
    pub samples_per_cell: usize,
    pub density: usize,
    /// DFA alphabet size; `None` uses the number of states.
    pub alphabet_size: Option<usize>,
    /// Objects per box-tracking prompt.
    pub num_objects: usize,
    pub seed: u64,
    /// URL of a protocol server, or `"synthetic"`.
    pub model_endpoint: String,
    pub synthetic: SyntheticConfig,
    pub decode: DecodeConfig,
    pub patching: PatchingConfig,
    pub attention: AttentionConfig,
    /// Upper bound on concurrent model calls.
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain: Domain::AbstractDfa,
            grid: None,
            samples_per_cell: 100,
            density: DEFAULT_DENSITY,
            alphabet_size: None,
            num_objects: 3,
            seed: 0,
            model_endpoint: SYNTHETIC.into(),
            synthetic: SyntheticConfig::default(),
            decode: DecodeConfig::default(),
            patching: PatchingConfig::default(),
            attention: AttentionConfig::default(),
            parallelism: 8,
        }
    }
}

fn strictly_increasing(name: &str, axis: &[usize]) -> Result<(), RunError> {
    if axis.is_empty() {
        return Err(RunError::Config(format!("{name} is empty")));
    }
    if axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RunError::Config(format!("{name} must be strictly increasing: {axis:?}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn axes(&self) -> GridAxes {
        self.grid.clone().unwrap_or_else(|| GridAxes::default_for(self.domain))
    }

    pub fn is_synthetic(&self) -> bool {
        self.model_endpoint == SYNTHETIC
    }

    /// Hex SHA-256 of the canonical JSON encoding. Every field is included.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn scheme(&self) -> Result<Scheme, RunError> {
        let scheme = match (self.patching.scheme, self.domain) {
            (Some(s), _) => s,
            (None, Domain::BoxTracking) => Scheme::BoxInitialOrLastMove,
            (None, Domain::AbstractDfa) => Scheme::DfaSameActionDifferentState,
            (None, Domain::FruitStore) => {
                return Err(RunError::Config("no corruption scheme exists for the fruit-store domain".into()))
            }
        };
        if scheme.domain() != self.domain {
            return Err(RunError::Config(format!("scheme {scheme} does not apply to domain {}", self.domain)));
        }
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let axes = self.axes();
        let (rows, cols) = match axes {
            GridAxes::States { .. } if self.domain == Domain::FruitStore => {
                return Err(RunError::Config("fruit store needs n_axis and clues_axis".into()))
            }
            GridAxes::Fruit { .. } if self.domain != Domain::FruitStore => {
                return Err(RunError::Config(format!("{} needs states_axis and transitions_axis", self.domain)))
            }
            GridAxes::States { .. } => ("states_axis", "transitions_axis"),
            GridAxes::Fruit { .. } => ("n_axis", "clues_axis"),
        };
        strictly_increasing(rows, axes.rows())?;
        strictly_increasing(cols, axes.cols())?;
        if self.samples_per_cell == 0 {
            return Err(RunError::Config("samples_per_cell must be at least 1".into()));
        }
        if self.density == 0 {
            return Err(RunError::Config("density must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(RunError::Config("parallelism must be at least 1".into()));
        }
        if !self.decode.greedy {
            return Err(RunError::Config("only greedy decoding is supported".into()));
        }
        if self.decode.max_new_tokens == 0 {
            return Err(RunError::Config("decode.max_new_tokens must be at least 1".into()));
        }
        if self.attention.k == 0 {
            return Err(RunError::Config("attention.k must be at least 1".into()));
        }
        Ok(())
    }
}
