// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic finite automata: construction, validation, simulation and
//! trajectory sampling.
//!
//! States are labelled with lowercase letters (`a`..`z`, then `aa`, `ab`, ...)
//! and actions with uppercase letters (`A`..`Z`, then `AA`, ...). The
//! transition function is partial. Generated automata have a fixed per-state
//! out-degree, the *transition density*, so `|delta| / |Q|` is an integer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::{rng_from_seed, Rng};

/// Largest number of labels a single alphabet can produce (one and two letters).
pub const MAX_LABELS: usize = 26 + 26 * 26;

/// Transition density used when none is configured.
pub const DEFAULT_DENSITY: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DfaError {
    #[error("automaton needs at least one state")]
    ZeroStates,
    #[error("transition density must be at least 1")]
    ZeroDensity,
    #[error("density {density} exceeds alphabet size {alphabet_size}")]
    DensityExceedsAlphabet { density: usize, alphabet_size: usize },
    #[error("{requested} labels requested, at most {MAX_LABELS} are available")]
    TooManyLabels { requested: usize },
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("no transition defined for ({state}, {action})")]
    UndefinedTransition { state: String, action: String },
    #[error("state `{0}` has no outgoing transitions")]
    DeadEndState(String),
    #[error("conflicting transitions for ({state}, {action})")]
    NondeterministicTransition { state: String, action: String },
    #[error("trajectory step {index} does not follow the transition function")]
    InconsistentTrajectory { index: usize },
}

macro_rules! label_type {
    ($(#[$meta:meta])* $name:ident, $base:literal) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            /// Label for the `index`-th element of the alphabet.
            pub fn nth(index: usize) -> Result<Self, DfaError> {
                label(index, $base).map($name)
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }
    };
}

label_type!(
    /// A state identifier (`a`, `b`, ..., `aa`, ...).
    StateId,
    b'a'
);
label_type!(
    /// An action identifier (`A`, `B`, ..., `AA`, ...).
    ActionId,
    b'A'
);

fn label(index: usize, base: u8) -> Result<String, DfaError> {
    if index < 26 {
        return Ok(((base + index as u8) as char).to_string());
    }
    let rest = index - 26;
    if rest >= 26 * 26 {
        return Err(DfaError::TooManyLabels { requested: index + 1 });
    }
    let hi = (base + (rest / 26) as u8) as char;
    let lo = (base + (rest % 26) as u8) as char;
    Ok(format!("{hi}{lo}"))
}

fn labels<T>(count: usize, make: fn(usize) -> Result<T, DfaError>) -> Result<Vec<T>, DfaError> {
    if count > MAX_LABELS {
        return Err(DfaError::TooManyLabels { requested: count });
    }
    (0..count).map(make).collect()
}

/// The tuple (Q, Σ, δ, q0, F) plus the seed it was generated from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dfa {
    states: Vec<StateId>,
    alphabet: Vec<ActionId>,
    delta: BTreeMap<(StateId, ActionId), StateId>,
    start: StateId,
    terminals: BTreeSet<StateId>,
    seed: u64,
    // Outgoing transitions per state, in alphabet order.
    outgoing: BTreeMap<StateId, Vec<(ActionId, StateId)>>,
}

impl Dfa {
    /// Assembles an automaton without checking the invariants; run
    /// [`validate_dfa`] to list violations. Only a repeated `(state, action)`
    /// with two different targets is rejected, since a map cannot hold it.
    pub fn from_parts<I>(
        states: Vec<StateId>,
        alphabet: Vec<ActionId>,
        transitions: I,
        start: StateId,
        terminals: BTreeSet<StateId>,
        seed: u64,
    ) -> Result<Self, DfaError>
    where
        I: IntoIterator<Item = (StateId, ActionId, StateId)>,
    {
        let mut delta = BTreeMap::new();
        for (s, a, t) in transitions {
            if let Some(prev) = delta.insert((s.clone(), a.clone()), t.clone()) {
                if prev != t {
                    return Err(DfaError::NondeterministicTransition { state: s.0, action: a.0 });
                }
            }
        }
        let mut dfa = Dfa { states, alphabet, delta, start, terminals, seed, outgoing: BTreeMap::new() };
        dfa.reindex();
        Ok(dfa)
    }

    fn reindex(&mut self) {
        let mut outgoing: BTreeMap<StateId, Vec<(ActionId, StateId)>> = BTreeMap::new();
        for s in &self.states {
            let row = self
                .alphabet
                .iter()
                .filter_map(|a| self.delta.get(&(s.clone(), a.clone())).map(|t| (a.clone(), t.clone())))
                .collect();
            outgoing.insert(s.clone(), row);
        }
        self.outgoing = outgoing;
    }

    pub(crate) fn set_transition(&mut self, state: StateId, action: ActionId, target: StateId) {
        self.delta.insert((state, action), target);
        self.reindex();
    }

    pub(crate) fn remove_transition(&mut self, state: &StateId, action: &ActionId) {
        self.delta.remove(&(state.clone(), action.clone()));
        self.reindex();
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn alphabet(&self) -> &[ActionId] {
        &self.alphabet
    }

    pub fn delta(&self) -> &BTreeMap<(StateId, ActionId), StateId> {
        &self.delta
    }

    pub fn start(&self) -> &StateId {
        &self.start
    }

    pub fn terminals(&self) -> &BTreeSet<StateId> {
        &self.terminals
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_state(&self, s: &StateId) -> bool {
        self.outgoing.contains_key(s)
    }

    pub fn has_action(&self, a: &ActionId) -> bool {
        self.alphabet.contains(a)
    }

    /// `delta(state, action)` if defined, without identifier checks.
    pub fn lookup(&self, state: &StateId, action: &ActionId) -> Option<&StateId> {
        self.delta.get(&(state.clone(), action.clone()))
    }

    /// Defined `(action, target)` pairs leaving `state`, in alphabet order.
    pub fn outgoing(&self, state: &StateId) -> &[(ActionId, StateId)] {
        self.outgoing.get(state).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Uniform per-state out-degree, if every state has the same one.
    pub fn density(&self) -> Option<usize> {
        let mut degrees = self.states.iter().map(|s| self.outgoing(s).len());
        let first = degrees.next()?;
        degrees.all(|d| d == first).then_some(first)
    }

    /// Canonical JSON (see [`DfaRecord`]).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dfa serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// `dfa.delta(state, action)` with identifier checks.
pub fn step(dfa: &Dfa, state: &StateId, action: &ActionId) -> Result<StateId, DfaError> {
    if !dfa.has_state(state) {
        return Err(DfaError::UnknownState(state.0.clone()));
    }
    if !dfa.has_action(action) {
        return Err(DfaError::UnknownAction(action.0.clone()));
    }
    dfa.lookup(state, action).cloned().ok_or_else(|| DfaError::UndefinedTransition {
        state: state.0.clone(),
        action: action.0.clone(),
    })
}

/// Generates a random automaton with exactly `density` outgoing actions per
/// state. Actions are drawn without replacement; targets are uniform over all
/// states, self-loops included. Pure in its arguments.
pub fn generate_dfa(num_states: usize, alphabet_size: usize, density: usize, seed: u64) -> Result<Dfa, DfaError> {
    if num_states == 0 {
        return Err(DfaError::ZeroStates);
    }
    if density == 0 {
        return Err(DfaError::ZeroDensity);
    }
    if density > alphabet_size {
        return Err(DfaError::DensityExceedsAlphabet { density, alphabet_size });
    }
    let states = labels(num_states, StateId::nth)?;
    let alphabet = labels(alphabet_size, ActionId::nth)?;
    let mut rng = rng_from_seed(seed);
    let mut transitions = Vec::with_capacity(num_states * density);
    for s in &states {
        for a in index::sample(&mut rng, alphabet_size, density).into_iter() {
            let t = rng.random_range(0..num_states);
            transitions.push((s.clone(), alphabet[a].clone(), states[t].clone()));
        }
    }
    let start = states[0].clone();
    Dfa::from_parts(states, alphabet, transitions, start, BTreeSet::new(), seed)
}

/// Lists every violated invariant. Empty iff the automaton is well formed.
pub fn validate_dfa(dfa: &Dfa) -> Vec<String> {
    let mut out = Vec::new();
    let state_set: BTreeSet<&StateId> = dfa.states.iter().collect();
    let action_set: BTreeSet<&ActionId> = dfa.alphabet.iter().collect();
    if dfa.states.is_empty() {
        out.push("states is empty".to_owned());
    }
    if state_set.len() != dfa.states.len() {
        out.push("states contains duplicates".to_owned());
    }
    if action_set.len() != dfa.alphabet.len() {
        out.push("alphabet contains duplicates".to_owned());
    }
    if !state_set.contains(&dfa.start) {
        out.push("start not in states".to_owned());
    }
    for t in &dfa.terminals {
        if !state_set.contains(t) {
            out.push(format!("terminal `{t}` not in states"));
        }
    }
    for ((s, a), t) in &dfa.delta {
        if !state_set.contains(s) {
            out.push(format!("delta source `{s}` not in states"));
        }
        if !action_set.contains(a) {
            out.push(format!("delta action `{a}` not in alphabet"));
        }
        if !state_set.contains(t) {
            out.push(format!("delta target `{t}` not in states"));
        }
    }
    if !dfa.states.is_empty() && dfa.density().is_none() {
        let degrees: Vec<String> =
            dfa.states.iter().map(|s| format!("{s}:{}", dfa.outgoing(s).len())).collect();
        out.push(format!(
            "density: |delta| = {} over {} states is not a uniform out-degree ({})",
            dfa.delta.len(),
            dfa.states.len(),
            degrees.join(", ")
        ));
    }
    out
}

/// One transition of a trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub action: ActionId,
    pub next: StateId,
}

/// A walk through an automaton from its start state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: StateId,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_state(&self) -> &StateId {
        self.steps.last().map(|s| &s.next).unwrap_or(&self.start)
    }

    /// State the `i`-th step departs from.
    pub fn source_of(&self, i: usize) -> &StateId {
        if i == 0 {
            &self.start
        } else {
            &self.steps[i - 1].next
        }
    }

    /// Re-runs every step through [`step`] and checks the recorded targets.
    pub fn replay(&self, dfa: &Dfa) -> Result<(), DfaError> {
        let mut cur = self.start.clone();
        for (i, st) in self.steps.iter().enumerate() {
            let next = step(dfa, &cur, &st.action)?;
            if next != st.next {
                return Err(DfaError::InconsistentTrajectory { index: i });
            }
            cur = next;
        }
        Ok(())
    }
}

/// Samples `length` steps from the start state, picking a uniformly random
/// defined action at each state.
pub fn sample_trajectory(dfa: &Dfa, length: usize, seed: u64) -> Result<Trajectory, DfaError> {
    let mut rng = rng_from_seed(seed);
    sample_trajectory_from(dfa, dfa.start(), length, &mut rng)
}

/// As [`sample_trajectory`] but from an arbitrary state and a caller-owned generator.
pub fn sample_trajectory_from(
    dfa: &Dfa,
    from: &StateId,
    length: usize,
    rng: &mut Rng,
) -> Result<Trajectory, DfaError> {
    if !dfa.has_state(from) {
        return Err(DfaError::UnknownState(from.0.clone()));
    }
    let mut cur = from.clone();
    let mut steps = Vec::with_capacity(length);
    for _ in 0..length {
        let out = dfa.outgoing(&cur);
        if out.is_empty() {
            return Err(DfaError::DeadEndState(cur.0));
        }
        let (a, t) = &out[rng.random_range(0..out.len())];
        steps.push(Step { action: a.clone(), next: t.clone() });
        cur = t.clone();
    }
    Ok(Trajectory { start: from.clone(), steps })
}

/// Canonical serialized form: `delta` as `[state, action, next]` triples in
/// lexicographic order, terminals sorted.
#[derive(Serialize, Deserialize)]
pub struct DfaRecord {
    pub states: Vec<StateId>,
    pub alphabet: Vec<ActionId>,
    pub delta: Vec<[String; 3]>,
    pub start: StateId,
    pub terminals: Vec<StateId>,
    pub seed: u64,
}

impl Serialize for Dfa {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        DfaRecord {
            states: self.states.clone(),
            alphabet: self.alphabet.clone(),
            delta: self.delta.iter().map(|((s, a), t)| [s.0.clone(), a.0.clone(), t.0.clone()]).collect(),
            start: self.start.clone(),
            terminals: self.terminals.iter().cloned().collect(),
            seed: self.seed,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Dfa {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rec = DfaRecord::deserialize(deserializer)?;
        let transitions = rec
            .delta
            .into_iter()
            .map(|[s, a, t]| (StateId(s), ActionId(a), StateId(t)));
        Dfa::from_parts(rec.states, rec.alphabet, transitions, rec.start, rec.terminals.into_iter().collect(), rec.seed)
            .map_err(serde::de::Error::custom)
    }
}
