// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clean/corrupted prompt pairs for activation patching.
//!
//! Three corruption schemes are supported:
//!
//! - [`Scheme::BoxInitialOrLastMove`] swaps the box letter of the queried
//!   object's initial placement or last move;
//! - [`Scheme::DfaSameActionDifferentState`] rewrites an earlier state token
//!   so the context demonstrates the final action going somewhere else;
//! - [`Scheme::DfaIrrelevantActions`] walks a run of self-loop actions from
//!   one of two states and flips which one.
//!
//! Every pair records its edits as character spans. Reverting the spans in
//! the corrupted prompt gives back the clean prompt byte for byte.

use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfa::{generate_dfa, sample_trajectory, ActionId, Dfa, DfaError, StateId, Step, Trajectory};
use crate::model::{ModelError, Tokenizer};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tasks::{
    box_oracle, render_abstract_dfa, render_box_tracking, render_prompt, AnswerSpec, BoxWorld, DfaPromptReading, Domain, TaskError,
    TaskInstance, TaskMeta,
};

/// Attempts a generator makes before giving up on a structural requirement.
pub const PAIR_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterfactualError {
    #[error("no alternative box to substitute")]
    NoAlternativeBox,
    #[error("queried object `{0}` never moves")]
    QueryObjectNeverMoved(String),
    #[error("queried object `{0}` moves, so its initial box does not decide the answer")]
    QueryObjectMoved(String),
    #[error("no state can be substituted to change the answer")]
    PatternAbsent,
    #[error("automaton has no action that self-loops at two states with distinguishable exits")]
    NoSelfLoop,
    #[error("no token-aligned pair after {attempts} attempts")]
    Misaligned { attempts: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Dfa(#[from] DfaError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    BoxInitialOrLastMove,
    DfaSameActionDifferentState,
    DfaIrrelevantActions,
}

impl Scheme {
    pub const ALL: [Scheme; 3] =
        [Scheme::BoxInitialOrLastMove, Scheme::DfaSameActionDifferentState, Scheme::DfaIrrelevantActions];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::BoxInitialOrLastMove => "box_initial_or_last_move",
            Scheme::DfaSameActionDifferentState => "dfa_same_action_different_state",
            Scheme::DfaIrrelevantActions => "dfa_irrelevant_actions",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Scheme::BoxInitialOrLastMove => Domain::BoxTracking,
            _ => Domain::AbstractDfa,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box_initial_or_last_move" | "box" => Ok(Scheme::BoxInitialOrLastMove),
            "dfa_same_action_different_state" | "same_action" => Ok(Scheme::DfaSameActionDifferentState),
            "dfa_irrelevant_actions" | "irrelevant" => Ok(Scheme::DfaIrrelevantActions),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

/// Which box-tracking sentence to corrupt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxCorruption {
    InitialPlacement,
    LastMove,
}

/// One replaced span, as byte offsets into each prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub clean_start: usize,
    pub clean_end: usize,
    pub corrupted_start: usize,
    pub corrupted_end: usize,
    pub clean_text: String,
    pub corrupted_text: String,
}

/// Serialized through [`PairRecord`].
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualPair {
    pub clean: TaskInstance,
    pub corrupted: TaskInstance,
    /// Answer token of the clean prompt, with its leading space.
    pub clean_answer: String,
    pub corrupted_answer: String,
    pub edit_positions: Vec<Edit>,
    pub scheme: Scheme,
}

impl CounterfactualPair {
    fn assemble(clean: TaskInstance, corrupted_prompt: String, corrupted_answer: String, scheme: Scheme) -> Self {
        let clean_answer = clean.answer.completion();
        let edit_positions = word_edits(&clean.prompt, &corrupted_prompt);
        let corrupted = TaskInstance {
            domain: clean.domain,
            prompt: corrupted_prompt,
            answer: AnswerSpec::SingleToken(corrupted_answer.clone()),
            meta: clean.meta.clone(),
        };
        CounterfactualPair { clean, corrupted, clean_answer, corrupted_answer, edit_positions, scheme }
    }

    pub fn to_record(&self, id: impl Into<String>) -> PairRecord {
        PairRecord {
            id: id.into(),
            scheme: self.scheme,
            clean_prompt: self.clean.prompt.clone(),
            corrupted_prompt: self.corrupted.prompt.clone(),
            clean_answer: self.clean_answer.clone(),
            corrupted_answer: self.corrupted_answer.clone(),
            edit_positions: self.edit_positions.clone(),
            meta: self.clean.meta.clone(),
        }
    }
}

/// One line of a pair file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub scheme: Scheme,
    pub clean_prompt: String,
    pub corrupted_prompt: String,
    pub clean_answer: String,
    pub corrupted_answer: String,
    pub edit_positions: Vec<Edit>,
    pub meta: TaskMeta,
}

impl PairRecord {
    pub fn to_pair(&self) -> CounterfactualPair {
        let inst = |prompt: &str, answer: &str| TaskInstance {
            domain: self.scheme.domain(),
            prompt: prompt.to_owned(),
            answer: AnswerSpec::SingleToken(answer.to_owned()),
            meta: self.meta.clone(),
        };
        CounterfactualPair {
            clean: inst(&self.clean_prompt, &self.clean_answer),
            corrupted: inst(&self.corrupted_prompt, &self.corrupted_answer),
            clean_answer: self.clean_answer.clone(),
            corrupted_answer: self.corrupted_answer.clone(),
            edit_positions: self.edit_positions.clone(),
            scheme: self.scheme,
        }
    }
}

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]").expect("valid regex"))
}

/// Word-level difference between two prompts.
///
/// When both prompts split into the same number of words, each differing
/// word is one edit. Otherwise the edit is the single span between the
/// longest common prefix and suffix.
pub fn word_edits(clean: &str, corrupted: &str) -> Vec<Edit> {
    if clean == corrupted {
        return Vec::new();
    }
    let a: Vec<_> = word_regex().find_iter(clean).collect();
    let b: Vec<_> = word_regex().find_iter(corrupted).collect();
    if a.len() == b.len() {
        let edits: Vec<Edit> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x.as_str() != y.as_str())
            .map(|(x, y)| Edit {
                clean_start: x.start(),
                clean_end: x.end(),
                corrupted_start: y.start(),
                corrupted_end: y.end(),
                clean_text: x.as_str().to_owned(),
                corrupted_text: y.as_str().to_owned(),
            })
            .collect();
        if revert_edits(corrupted, &edits) == clean {
            return edits;
        }
    }
    let prefix = clean.bytes().zip(corrupted.bytes()).take_while(|(x, y)| x == y).count();
    let mut prefix = prefix;
    while !clean.is_char_boundary(prefix) || !corrupted.is_char_boundary(prefix) {
        prefix -= 1;
    }
    let max_suffix = clean.len().min(corrupted.len()) - prefix;
    let mut suffix =
        clean.bytes().rev().zip(corrupted.bytes().rev()).take(max_suffix).take_while(|(x, y)| x == y).count();
    while !clean.is_char_boundary(clean.len() - suffix) || !corrupted.is_char_boundary(corrupted.len() - suffix) {
        suffix -= 1;
    }
    vec![Edit {
        clean_start: prefix,
        clean_end: clean.len() - suffix,
        corrupted_start: prefix,
        corrupted_end: corrupted.len() - suffix,
        clean_text: clean[prefix..clean.len() - suffix].to_owned(),
        corrupted_text: corrupted[prefix..corrupted.len() - suffix].to_owned(),
    }]
}

/// Puts the clean text of every edit back into `corrupted`.
pub fn revert_edits(corrupted: &str, edits: &[Edit]) -> String {
    let mut out = String::with_capacity(corrupted.len());
    let mut at = 0;
    let mut sorted: Vec<&Edit> = edits.iter().collect();
    sorted.sort_by_key(|e| e.corrupted_start);
    for e in sorted {
        if e.corrupted_start < at || e.corrupted_end > corrupted.len() {
            return String::new();
        }
        out.push_str(&corrupted[at..e.corrupted_start]);
        out.push_str(&e.clean_text);
        at = e.corrupted_end;
    }
    out.push_str(&corrupted[at..]);
    out
}

/// Swaps one box letter so the queried object's final box changes.
pub fn corrupt_box(
    world: &BoxWorld,
    instance: &TaskInstance,
    mode: BoxCorruption,
    seed: u64,
) -> Result<CounterfactualPair, CounterfactualError> {
    if world.boxes.len() < 2 {
        return Err(CounterfactualError::NoAlternativeBox);
    }
    let query = &instance.meta.queried_entity;
    box_oracle(world, query)?;
    let mut rng = rng_from_seed(seed);
    let mut corrupted = world.clone();
    match mode {
        BoxCorruption::LastMove => {
            let i = world.last_move_of(query).ok_or_else(|| CounterfactualError::QueryObjectNeverMoved(query.clone()))?;
            let m = &world.moves[i];
            let options: Vec<&String> = world.boxes.iter().filter(|b| **b != m.to && **b != m.from).collect();
            let pick = options.choose(&mut rng).ok_or(CounterfactualError::NoAlternativeBox)?;
            corrupted.moves[i].to = (*pick).clone();
        }
        BoxCorruption::InitialPlacement => {
            if world.last_move_of(query).is_some() {
                return Err(CounterfactualError::QueryObjectMoved(query.clone()));
            }
            let current = &world.initial[query];
            let options: Vec<&String> = world.boxes.iter().filter(|b| *b != current).collect();
            let pick = options.choose(&mut rng).ok_or(CounterfactualError::NoAlternativeBox)?;
            corrupted.initial.insert(query.clone(), (*pick).clone());
        }
    }
    let answer = box_oracle(&corrupted, query)?;
    Ok(CounterfactualPair::assemble(
        instance.clone(),
        corrupted.render(query),
        format!(" {answer}"),
        Scheme::BoxInitialOrLastMove,
    ))
}

/// The corruption mode that applies to the instance's queried object.
pub fn box_mode_for(world: &BoxWorld, query: &str) -> BoxCorruption {
    if world.last_move_of(query).is_some() {
        BoxCorruption::LastMove
    } else {
        BoxCorruption::InitialPlacement
    }
}

fn with_source(traj: &Trajectory, k: usize, state: StateId) -> Trajectory {
    let mut t = traj.clone();
    if k == 0 {
        t.start = state;
    } else {
        t.steps[k - 1].next = state;
    }
    t
}

fn literal_answer(dfa: &Dfa, traj: &Trajectory) -> Option<StateId> {
    let reading = DfaPromptReading::parse(&render_prompt(traj))?;
    reading.literal_answer(dfa)
}

/// Makes the context claim that the final action, taken from the final
/// context state, leads somewhere else.
///
/// Preferred form: an earlier step that takes the final action `A` from
/// another state `p` has `p` rewritten to the context state `q`, so the
/// text now demonstrates `q --A--> delta(p, A)`. This requires that no true
/// `(q, A)` step comes later. When no such step exists, the context state
/// token itself is rewritten to another state `r` whose `A`-successor
/// differs. The corrupted answer is what a literal reader of the corrupted
/// text predicts.
pub fn corrupt_dfa_same_action(
    dfa: &Dfa,
    traj: &Trajectory,
    seed: u64,
) -> Result<CounterfactualPair, CounterfactualError> {
    let clean = render_abstract_dfa(dfa, traj)?;
    let t = traj.len();
    let q = traj.source_of(t - 1).clone();
    let a = traj.steps[t - 1].action.clone();
    let clean_answer = traj.steps[t - 1].next.clone();

    let mut earlier = Vec::new();
    for k in (0..t - 1).rev() {
        if traj.steps[k].action != a {
            continue;
        }
        let p = traj.source_of(k);
        if *p == q {
            break;
        }
        if p.as_str().len() == q.as_str().len() && traj.steps[k].next != clean_answer {
            earlier.push(k);
        }
    }
    let mut rng = rng_from_seed(seed);
    let (k, r) = if let Some(&k) = earlier.choose(&mut rng) {
        (k, q.clone())
    } else {
        let options: Vec<&StateId> = dfa
            .states()
            .iter()
            .filter(|r| **r != q && r.as_str().len() == q.as_str().len())
            .filter(|r| {
                literal_answer(dfa, &with_source(traj, t - 1, (*r).clone())).is_some_and(|x| x != clean_answer)
            })
            .collect();
        let r = options.choose(&mut rng).ok_or(CounterfactualError::PatternAbsent)?;
        (t - 1, (*r).clone())
    };
    let corrupted = with_source(traj, k, r);
    let answer = literal_answer(dfa, &corrupted).ok_or(CounterfactualError::PatternAbsent)?;
    debug_assert_ne!(answer, clean_answer);
    Ok(CounterfactualPair::assemble(
        clean,
        render_prompt(&corrupted),
        format!(" {answer}"),
        Scheme::DfaSameActionDifferentState,
    ))
}

/// `(p, r, noop, final)` with `noop` a self-loop at both `p` and `r` and
/// `final` leading to different states from them.
fn irrelevant_patterns(dfa: &Dfa) -> Vec<(StateId, StateId, ActionId, ActionId)> {
    let mut out = Vec::new();
    for c in dfa.alphabet() {
        let loops: Vec<&StateId> = dfa.states().iter().filter(|s| dfa.lookup(s, c) == Some(*s)).collect();
        for p in &loops {
            for r in &loops {
                if p == r || p.as_str().len() != r.as_str().len() {
                    continue;
                }
                for (a, tp) in dfa.outgoing(p) {
                    if a == c {
                        continue;
                    }
                    if dfa.lookup(r, a).is_some_and(|tr| tr != tp) {
                        out.push(((*p).clone(), (*r).clone(), c.clone(), a.clone()));
                    }
                }
            }
        }
    }
    out
}

/// Clean: start at `p`, take a self-loop action `noop_run_length` times,
/// then an action whose target depends on the state. Corrupted: the same
/// walk from `r`, so every state token flips.
///
/// Patterns starting at the automaton's start state are preferred.
pub fn corrupt_dfa_irrelevant(
    dfa: &Dfa,
    noop_run_length: usize,
    seed: u64,
) -> Result<CounterfactualPair, CounterfactualError> {
    let all = irrelevant_patterns(dfa);
    let from_start: Vec<_> = all.iter().filter(|(p, ..)| p == dfa.start()).collect();
    let pool: Vec<_> = if from_start.is_empty() { all.iter().collect() } else { from_start };
    let mut rng = rng_from_seed(seed);
    let (p, r, c, a) = *pool.choose(&mut rng).ok_or(CounterfactualError::NoSelfLoop)?;
    let walk = |s: &StateId| {
        let mut steps: Vec<Step> = (0..noop_run_length).map(|_| Step { action: c.clone(), next: s.clone() }).collect();
        steps.push(Step { action: a.clone(), next: dfa.lookup(s, a).expect("pattern transition").clone() });
        Trajectory { start: s.clone(), steps }
    };
    let clean = render_abstract_dfa(dfa, &walk(p))?;
    let corrupted = render_abstract_dfa(dfa, &walk(r))?;
    let answer = corrupted.answer.completion();
    Ok(CounterfactualPair::assemble(clean, corrupted.prompt, answer, Scheme::DfaIrrelevantActions))
}

// Gives `state` the transition `action -> target`, swapping out a random
// unprotected action if needed to keep the out-degree.
fn plant(dfa: &mut Dfa, state: &StateId, action: &ActionId, target: &StateId, protected: &[ActionId], rng: &mut Rng) {
    if dfa.lookup(state, action).is_none() {
        let removable: Vec<ActionId> =
            dfa.outgoing(state).iter().map(|(a, _)| a.clone()).filter(|a| !protected.contains(a)).collect();
        if let Some(victim) = removable.choose(rng) {
            dfa.remove_transition(state, victim);
        }
    }
    dfa.set_transition(state.clone(), action.clone(), target.clone());
}

fn pick_other<'a>(states: &'a [StateId], not: &StateId, rng: &mut Rng) -> &'a StateId {
    let others: Vec<&StateId> = states.iter().filter(|s| *s != not).collect();
    others.choose(rng).expect("at least two states")
}

/// Random automaton with a planted same-action pattern: `p --A--> q` and
/// `q --A--> y` with `y != q`, where `p` is the start state. Every state
/// keeps exactly `density` outgoing actions.
pub fn same_action_dfa(
    num_states: usize,
    alphabet_size: usize,
    density: usize,
    seed: u64,
) -> Result<Dfa, CounterfactualError> {
    if num_states < 2 {
        return Err(CounterfactualError::InvalidParameter("same-action pattern needs at least 2 states".into()));
    }
    let mut dfa = generate_dfa(num_states, alphabet_size, density, derive_seed(seed, &[0]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let states = dfa.states().to_vec();
    let a = dfa.alphabet()[rng.random_range(0..alphabet_size)].clone();
    let p = dfa.start().clone();
    let q = pick_other(&states, &p, &mut rng).clone();
    let y = pick_other(&states, &q, &mut rng).clone();
    plant(&mut dfa, &p, &a, &q, &[], &mut rng);
    plant(&mut dfa, &q, &a, &y, &[], &mut rng);
    Ok(dfa)
}

/// Random automaton with a planted irrelevant-action pattern: a no-op
/// action self-loops at the start state `p` and at another state `r`, and a
/// second action leaves `p` and `r` for different states. Needs
/// `density >= 2`.
pub fn irrelevant_actions_dfa(
    num_states: usize,
    alphabet_size: usize,
    density: usize,
    seed: u64,
) -> Result<Dfa, CounterfactualError> {
    if num_states < 2 || density < 2 {
        return Err(CounterfactualError::InvalidParameter(
            "irrelevant-action pattern needs at least 2 states and density 2".into(),
        ));
    }
    let mut dfa = generate_dfa(num_states, alphabet_size, density, derive_seed(seed, &[0]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let states = dfa.states().to_vec();
    let picks = rand::seq::index::sample(&mut rng, alphabet_size, 2);
    let c = dfa.alphabet()[picks.index(0)].clone();
    let a = dfa.alphabet()[picks.index(1)].clone();
    let p = dfa.start().clone();
    let r = pick_other(&states, &p, &mut rng).clone();
    let xp = states[rng.random_range(0..num_states)].clone();
    let xr = pick_other(&states, &xp, &mut rng).clone();
    let keep = [c.clone(), a.clone()];
    plant(&mut dfa, &p, &c, &p, &keep, &mut rng);
    plant(&mut dfa, &r, &c, &r, &keep, &mut rng);
    plant(&mut dfa, &p, &a, &xp, &keep, &mut rng);
    plant(&mut dfa, &r, &a, &xr, &keep, &mut rng);
    Ok(dfa)
}

/// Token-level view of a pair under a given tokenizer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub clean_tokens: usize,
    pub corrupted_tokens: usize,
    pub aligned: bool,
    /// Token index range `[start, end)` of each edit in the corrupted prompt.
    pub edit_token_spans: Vec<(usize, usize)>,
    /// Indices at which the two id sequences differ (aligned pairs only).
    pub differing_positions: Vec<usize>,
    pub multi_token_edit: bool,
    pub answers_single_token: bool,
}

/// Tokenizes both prompts and locates each edit in token space.
pub fn check_alignment(pair: &CounterfactualPair, tokenizer: &dyn Tokenizer) -> Result<AlignmentReport, ModelError> {
    let clean = tokenizer.tokenize(&pair.clean.prompt)?;
    let corrupted = tokenizer.tokenize(&pair.corrupted.prompt)?;
    let aligned = clean.len() == corrupted.len();
    let differing_positions = if aligned {
        (0..clean.len()).filter(|&i| clean[i] != corrupted[i]).collect()
    } else {
        Vec::new()
    };
    // Leading whitespace belongs to the following token, so a span starts
    // after the trimmed prefix.
    let count = |text: &str, end: usize| tokenizer.tokenize(&text[..end]).map(|v| v.len());
    let count_before = |text: &str, start: usize| tokenizer.tokenize(text[..start].trim_end()).map(|v| v.len());
    let mut edit_token_spans = Vec::new();
    let mut multi_token_edit = !aligned;
    for e in &pair.edit_positions {
        let cs = count_before(&pair.corrupted.prompt, e.corrupted_start)?;
        let ce = count(&pair.corrupted.prompt, e.corrupted_end)?;
        let ks = count_before(&pair.clean.prompt, e.clean_start)?;
        let ke = count(&pair.clean.prompt, e.clean_end)?;
        if ce - cs != 1 || ke - ks != 1 {
            multi_token_edit = true;
        }
        edit_token_spans.push((cs, ce));
    }
    let single = |s: &str| tokenizer.tokenize(s).map(|v| v.len() == 1);
    let answers_single_token = single(&pair.clean_answer)? && single(&pair.corrupted_answer)?;
    Ok(AlignmentReport {
        clean_tokens: clean.len(),
        corrupted_tokens: corrupted.len(),
        aligned,
        edit_token_spans,
        differing_positions,
        multi_token_edit,
        answers_single_token,
    })
}

/// Random box-tracking pair, resampled until it is token-aligned under
/// `tokenizer` with single-token answers.
pub fn generate_box_pair(
    num_boxes: usize,
    num_objects: usize,
    num_moves: usize,
    seed: u64,
    tokenizer: &dyn Tokenizer,
) -> Result<CounterfactualPair, CounterfactualError> {
    if num_boxes < 2 {
        return Err(CounterfactualError::NoAlternativeBox);
    }
    for attempt in 0..PAIR_RETRY_BUDGET as u64 {
        let (world, inst) = render_box_tracking(num_boxes, num_objects, num_moves, derive_seed(seed, &[attempt, 0]))?;
        let mode = box_mode_for(&world, &inst.meta.queried_entity);
        let pair = match corrupt_box(&world, &inst, mode, derive_seed(seed, &[attempt, 1])) {
            Ok(p) => p,
            // Two boxes leave no legal alternative destination for a move.
            Err(CounterfactualError::NoAlternativeBox) => continue,
            Err(e) => return Err(e),
        };
        let report = check_alignment(&pair, tokenizer)?;
        if report.aligned && report.answers_single_token {
            let mut pair = pair;
            pair.clean.meta.seed = seed;
            pair.corrupted.meta.seed = seed;
            return Ok(pair);
        }
    }
    Err(CounterfactualError::Misaligned { attempts: PAIR_RETRY_BUDGET })
}

/// Samples trajectories of `transitions` steps on `dfa` until one admits a
/// same-action corruption.
pub fn generate_same_action_pair(
    dfa: &Dfa,
    transitions: usize,
    seed: u64,
) -> Result<CounterfactualPair, CounterfactualError> {
    if transitions == 0 {
        return Err(TaskError::EmptyTrajectory.into());
    }
    for attempt in 0..PAIR_RETRY_BUDGET as u64 {
        let traj = sample_trajectory(dfa, transitions, derive_seed(seed, &[attempt, 0]))?;
        match corrupt_dfa_same_action(dfa, &traj, derive_seed(seed, &[attempt, 1])) {
            Ok(p) => return Ok(p),
            Err(CounterfactualError::PatternAbsent) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CounterfactualError::PatternAbsent)
}

/// Every broken pair invariant, checked by re-reading the prompts. Empty
/// means the pair is valid.
pub fn pair_violations(pair: &CounterfactualPair, dfa: Option<&Dfa>) -> Vec<String> {
    let mut out = Vec::new();
    if pair.clean_answer == pair.corrupted_answer {
        out.push(format!("answers coincide: {:?}", pair.clean_answer));
    }
    if revert_edits(&pair.corrupted.prompt, &pair.edit_positions) != pair.clean.prompt {
        out.push("reverting the edits does not reproduce the clean prompt".into());
    }
    if pair.edit_positions.is_empty() {
        out.push("no edits".into());
    }
    let literal = |prompt: &str| -> Option<String> {
        match pair.scheme.domain() {
            Domain::BoxTracking => {
                let (world, query) = BoxWorld::parse_prompt(prompt)?;
                if !world.invalid_moves().is_empty() {
                    return None;
                }
                box_oracle(&world, &query).ok().map(|b| format!(" {b}"))
            }
            _ => DfaPromptReading::parse(prompt)?.literal_answer(dfa?).map(|s| format!(" {s}")),
        }
    };
    match literal(&pair.clean.prompt) {
        Some(a) if a == pair.clean_answer => {}
        other => out.push(format!("clean prompt reads as {other:?}, recorded {:?}", pair.clean_answer)),
    }
    match literal(&pair.corrupted.prompt) {
        Some(a) if a == pair.corrupted_answer => {}
        other => out.push(format!("corrupted prompt reads as {other:?}, recorded {:?}", pair.corrupted_answer)),
    }
    out
}
