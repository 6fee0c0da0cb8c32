// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fruit store: `n` people share `n` distinct fruits under assignment and
//! transfer clues.
//!
//! Clue semantics concern the final allocation only:
//!
//! - "X takes the Y." pins Y to X.
//! - "X gives Z the Y." pins Y to Z and rules out X holding Y.
//!
//! The oracle does not enumerate the `n!` bijections. Each clue removes
//! edges from the person/fruit bipartite graph, and a (person, fruit) edge is
//! feasible iff the remaining graph still has a perfect matching with that
//! edge fixed.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::words::{fruits, names};
use super::{AnswerSpec, Domain, TaskError, TaskInstance, TaskMeta};
use crate::rng::rng_from_seed;

/// Attempts allowed when drawing a clue set before giving up.
pub const CLUE_RETRY_BUDGET: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clue {
    Takes { person: String, fruit: String },
    Gives { giver: String, receiver: String, fruit: String },
}

impl Clue {
    /// Person who finally holds the clue's fruit.
    pub fn holder(&self) -> &str {
        match self {
            Clue::Takes { person, .. } => person,
            Clue::Gives { receiver, .. } => receiver,
        }
    }

    pub fn fruit(&self) -> &str {
        match self {
            Clue::Takes { fruit, .. } | Clue::Gives { fruit, .. } => fruit,
        }
    }
}

impl fmt::Display for Clue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Clue::Takes { person, fruit } => write!(f, "{person} takes the {fruit}."),
            Clue::Gives { giver, receiver, fruit } => write!(f, "{giver} gives {receiver} the {fruit}."),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FruitWorld {
    pub people: Vec<String>,
    pub fruits: Vec<String>,
    pub clues: Vec<Clue>,
    pub queried_person: String,
}

impl FruitWorld {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} walk into a fruit store. There are only {} fruits: {}. Each person gets a different fruit.",
            self.people.join(", "),
            self.fruits.len(),
            self.fruits.join(", ")
        );
        for c in &self.clues {
            s.push(' ');
            s.push_str(&c.to_string());
        }
        s.push_str(&format!(" {} can have the", self.queried_person));
        s
    }

    /// Reads a rendered prompt back into a world. Text after the final
    /// "can have the" is ignored.
    pub fn parse_prompt(text: &str) -> Option<FruitWorld> {
        let cut = text.rfind(" can have the")?;
        let head = &text[..cut];
        let (people, rest) = head.split_once(" walk into a fruit store. There are only ")?;
        let (_, rest) = rest.split_once(" fruits: ")?;
        let (fruit_list, rest) = rest.split_once(". Each person gets a different fruit.")?;
        let (clue_text, queried) = rest.rsplit_once(' ')?;
        let people: Vec<String> = people.split(", ").map(str::to_owned).collect();
        let fruits: Vec<String> = fruit_list.split(", ").map(str::to_owned).collect();
        let mut clues = Vec::new();
        for sentence in clue_text.split('.').map(str::trim).filter(|s| !s.is_empty()) {
            let w: Vec<&str> = sentence.split(' ').collect();
            match w.as_slice() {
                [p, "takes", "the", f] => clues.push(Clue::Takes { person: (*p).into(), fruit: (*f).into() }),
                [g, "gives", r, "the", f] => {
                    clues.push(Clue::Gives { giver: (*g).into(), receiver: (*r).into(), fruit: (*f).into() })
                }
                _ => return None,
            }
        }
        Some(FruitWorld { people, fruits, clues, queried_person: queried.to_owned() })
    }

    /// `allowed[p][f]`: person `p` may finally hold fruit `f` given each clue
    /// on its own. `None` if a clue names an unknown person or fruit.
    fn allowed(&self) -> Option<Vec<Vec<bool>>> {
        let n = self.people.len();
        let m = self.fruits.len();
        let mut allowed = vec![vec![true; m]; n];
        let pidx = |name: &str| self.people.iter().position(|p| p == name);
        let fidx = |name: &str| self.fruits.iter().position(|f| f == name);
        for c in &self.clues {
            let h = pidx(c.holder())?;
            let f = fidx(c.fruit())?;
            for (p, row) in allowed.iter_mut().enumerate() {
                for (g, cell) in row.iter_mut().enumerate() {
                    if (p == h) != (g == f) {
                        *cell = false;
                    }
                }
            }
            if let Clue::Gives { giver, .. } = c {
                allowed[pidx(giver)?][f] = false;
            }
        }
        Some(allowed)
    }
}

// Kuhn's augmenting-path matching over the allowed graph with one person and
// one fruit removed.
fn has_perfect_matching(allowed: &[Vec<bool>], skip_person: usize, skip_fruit: usize) -> bool {
    let n = allowed.len();
    let m = allowed.first().map_or(0, Vec::len);
    let mut owner: Vec<Option<usize>> = vec![None; m];

    fn augment(
        p: usize,
        allowed: &[Vec<bool>],
        skip_fruit: usize,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for f in 0..owner.len() {
            if f == skip_fruit || !allowed[p][f] || seen[f] {
                continue;
            }
            seen[f] = true;
            if owner[f].is_none_or(|q| augment(q, allowed, skip_fruit, seen, owner)) {
                owner[f] = Some(p);
                return true;
            }
        }
        false
    }

    for p in (0..n).filter(|&p| p != skip_person) {
        let mut seen = vec![false; m];
        if !augment(p, allowed, skip_fruit, &mut seen, &mut owner) {
            return false;
        }
    }
    true
}

/// Fruits `person` holds in at least one bijection consistent with every
/// clue, in `world.fruits` order. Empty only when the clues contradict.
pub fn fruit_oracle(world: &FruitWorld, person: &str) -> Result<Vec<String>, TaskError> {
    let p = world
        .people
        .iter()
        .position(|x| x == person)
        .ok_or_else(|| TaskError::UnknownPerson(person.to_owned()))?;
    if world.people.len() != world.fruits.len() {
        return Ok(Vec::new());
    }
    let Some(allowed) = world.allowed() else {
        return Ok(Vec::new());
    };
    Ok(world
        .fruits
        .iter()
        .enumerate()
        .filter(|&(f, _)| allowed[p][f] && has_perfect_matching(&allowed, p, f))
        .map(|(_, name)| name.clone())
        .collect())
}

pub(crate) fn fruit_instance(world: &FruitWorld, seed: u64) -> Result<TaskInstance, TaskError> {
    let feasible = fruit_oracle(world, &world.queried_person)?;
    if feasible.is_empty() {
        return Err(TaskError::UnsatisfiableClues { attempts: 1 });
    }
    Ok(TaskInstance {
        domain: Domain::FruitStore,
        prompt: world.render(),
        answer: AnswerSpec::FeasibleSet(feasible),
        meta: TaskMeta {
            num_states: world.people.len(),
            num_transitions: 0,
            num_objects: None,
            num_clues: Some(world.clues.len()),
            seed,
            queried_entity: world.queried_person.clone(),
        },
    })
}

/// Random fruit-store instance with `num_clues` clues consistent with a
/// hidden allocation, querying a uniformly chosen person.
pub fn render_fruit_store(n: usize, num_clues: usize, seed: u64) -> Result<(FruitWorld, TaskInstance), TaskError> {
    let max = names().len().min(fruits().len());
    if n < 2 || n > max {
        return Err(TaskError::InvalidParameter(format!("n must be in 2..={max}, got {n}")));
    }
    if num_clues >= n {
        return Err(TaskError::InvalidParameter(format!("num_clues must be < n ({n}), got {num_clues}")));
    }
    let mut rng = rng_from_seed(seed);
    let people: Vec<String> = index::sample(&mut rng, names().len(), n).into_iter().map(|i| names()[i].into()).collect();
    let fruit_names: Vec<String> =
        index::sample(&mut rng, fruits().len(), n).into_iter().map(|i| fruits()[i].into()).collect();
    for _ in 0..CLUE_RETRY_BUDGET {
        let mut hidden: Vec<usize> = (0..n).collect();
        hidden.shuffle(&mut rng);
        let receivers = index::sample(&mut rng, n, num_clues);
        let clues: Vec<Clue> = receivers
            .into_iter()
            .map(|r| {
                let fruit = fruit_names[hidden[r]].clone();
                if rng.random_bool(0.5) {
                    Clue::Takes { person: people[r].clone(), fruit }
                } else {
                    let mut g = rng.random_range(0..n - 1);
                    if g >= r {
                        g += 1;
                    }
                    Clue::Gives { giver: people[g].clone(), receiver: people[r].clone(), fruit }
                }
            })
            .collect();
        let queried_person = people[rng.random_range(0..n)].clone();
        let world = FruitWorld { people: people.clone(), fruits: fruit_names.clone(), clues, queried_person };
        match fruit_instance(&world, seed) {
            Ok(inst) => return Ok((world, inst)),
            Err(TaskError::UnsatisfiableClues { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TaskError::UnsatisfiableClues { attempts: CLUE_RETRY_BUDGET })
}
