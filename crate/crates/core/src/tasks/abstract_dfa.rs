// SPDX-License-Identifier: MIT OR Apache-2.0

//! Abstract DFA prompts: "Start at state a. Take action M, go to state b. ..."

use super::{AnswerSpec, Domain, TaskError, TaskInstance, TaskMeta};
use crate::dfa::{generate_dfa, sample_trajectory, ActionId, Dfa, StateId, Trajectory};
use crate::rng::derive_seed;

/// Renders a trajectory with the final target left open.
pub fn render_abstract_dfa(dfa: &Dfa, traj: &Trajectory) -> Result<TaskInstance, TaskError> {
    let last = traj.steps.last().ok_or(TaskError::EmptyTrajectory)?;
    traj.replay(dfa)?;
    Ok(TaskInstance {
        domain: Domain::AbstractDfa,
        prompt: render_prompt(traj),
        answer: AnswerSpec::SingleToken(format!(" {}", last.next)),
        meta: TaskMeta {
            num_states: dfa.states().len(),
            num_transitions: traj.len(),
            num_objects: None,
            num_clues: None,
            seed: dfa.seed(),
            queried_entity: traj.source_of(traj.len() - 1).to_string(),
        },
    })
}

/// Prompt text for a non-empty trajectory, without consulting an automaton.
pub fn render_prompt(traj: &Trajectory) -> String {
    let mut out = format!("Start at state {}.", traj.start);
    let n = traj.steps.len();
    for (i, st) in traj.steps.iter().enumerate() {
        if i + 1 == n {
            out.push_str(&format!(" Take action {}, go to state", st.action));
        } else {
            out.push_str(&format!(" Take action {}, go to state {}.", st.action, st.next));
        }
    }
    out
}

/// Random automaton plus a sampled trajectory of `transitions` steps.
///
/// The automaton and the walk use independent sub-seeds of `seed`.
pub fn generate_abstract_dfa(
    num_states: usize,
    alphabet_size: usize,
    density: usize,
    transitions: usize,
    seed: u64,
) -> Result<(Dfa, Trajectory, TaskInstance), TaskError> {
    if transitions == 0 {
        return Err(TaskError::EmptyTrajectory);
    }
    let dfa = generate_dfa(num_states, alphabet_size, density, derive_seed(seed, &[0]))?;
    let traj = sample_trajectory(&dfa, transitions, derive_seed(seed, &[1]))?;
    let mut inst = render_abstract_dfa(&dfa, &traj)?;
    inst.meta.seed = seed;
    Ok((dfa, traj, inst))
}

/// A DFA prompt read back literally: the recorded start, the completed
/// steps, and the final open action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfaPromptReading {
    pub start: StateId,
    pub steps: Vec<(ActionId, StateId)>,
    pub final_action: ActionId,
}

impl DfaPromptReading {
    pub fn parse(prompt: &str) -> Option<Self> {
        let rest = prompt.strip_prefix("Start at state ")?;
        let (start, mut rest) = rest.split_once('.')?;
        let mut steps = Vec::new();
        loop {
            let r = rest.strip_prefix(" Take action ")?;
            let (action, r) = r.split_once(", go to state")?;
            if r.is_empty() {
                return Some(DfaPromptReading { start: start.into(), steps, final_action: action.into() });
            }
            let r = r.strip_prefix(' ')?;
            let (state, r) = r.split_once('.')?;
            steps.push((ActionId::from(action), StateId::from(state)));
            rest = r;
        }
    }

    /// The state the final action departs from according to the text.
    pub fn context_state(&self) -> &StateId {
        self.steps.last().map(|(_, s)| s).unwrap_or(&self.start)
    }

    /// Target of the most recent written step that takes `action` from `state`.
    pub fn demonstrated(&self, state: &StateId, action: &ActionId) -> Option<&StateId> {
        let mut src = &self.start;
        let mut found = None;
        for (a, next) in &self.steps {
            if src == state && a == action {
                found = Some(next);
            }
            src = next;
        }
        found
    }

    /// What a literal reader predicts for the open step: the most recent
    /// demonstration of `(context_state, final_action)` in the text, falling
    /// back to `dfa` when the prompt never shows it.
    pub fn literal_answer(&self, dfa: &Dfa) -> Option<StateId> {
        let q = self.context_state();
        self.demonstrated(q, &self.final_action)
            .or_else(|| dfa.lookup(q, &self.final_action))
            .cloned()
    }
}
