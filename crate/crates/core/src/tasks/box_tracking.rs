// SPDX-License-Identifier: MIT OR Apache-2.0

//! Box tracking: objects in lettered boxes, moved one at a time.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::words::{box_letter, nouns, MAX_BOXES};
use super::{AnswerSpec, Domain, TaskError, TaskInstance, TaskMeta};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxMove {
    pub object: String,
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxWorld {
    pub boxes: Vec<String>,
    /// Objects in rendering order.
    pub objects: Vec<String>,
    pub initial: BTreeMap<String, String>,
    pub moves: Vec<BoxMove>,
}

impl BoxWorld {
    /// Location of every object after applying all moves.
    pub fn final_locations(&self) -> BTreeMap<String, String> {
        let mut loc = self.initial.clone();
        for m in &self.moves {
            loc.insert(m.object.clone(), m.to.clone());
        }
        loc
    }

    /// Indices of moves whose `from` disagrees with the object's location.
    pub fn invalid_moves(&self) -> Vec<usize> {
        let mut loc = self.initial.clone();
        let mut bad = Vec::new();
        for (i, m) in self.moves.iter().enumerate() {
            if loc.get(&m.object) != Some(&m.from) || m.from == m.to || !self.boxes.contains(&m.to) {
                bad.push(i);
            }
            loc.insert(m.object.clone(), m.to.clone());
        }
        bad
    }

    /// Index of the last move of `object`, if it ever moves.
    pub fn last_move_of(&self, object: &str) -> Option<usize> {
        self.moves.iter().rposition(|m| m.object == object)
    }

    /// Sentences of the prompt, excluding the trailing query.
    pub fn sentences(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("The {o} is in Box {}.", self.initial[o]))
            .collect();
        out.extend(self.moves.iter().map(|m| format!("Move the {} from Box {} to Box {}.", m.object, m.from, m.to)));
        out
    }

    /// Full prompt ending at the completion point "... is in the Box".
    pub fn render(&self, query: &str) -> String {
        let mut s = self.sentences();
        s.push(format!("The {query} is in the Box"));
        s.join(" ")
    }

    /// Reads a rendered prompt back as written, returning the world and the
    /// queried object. Moves are taken literally and not checked.
    pub fn parse_prompt(text: &str) -> Option<(BoxWorld, String)> {
        let body = text.strip_suffix(" is in the Box")?;
        let (sentences, query) = match body.rsplit_once(". The ") {
            Some((s, q)) => (Some(s), q),
            None => (None, body.strip_prefix("The ")?),
        };
        let mut world = BoxWorld { boxes: Vec::new(), objects: Vec::new(), initial: BTreeMap::new(), moves: Vec::new() };
        let note_box = |b: &str, boxes: &mut Vec<String>| {
            if !boxes.iter().any(|x| x == b) {
                boxes.push(b.to_owned());
            }
        };
        for s in sentences.into_iter().flat_map(|s| s.split(". ")) {
            let w: Vec<&str> = s.trim_end_matches('.').split(' ').collect();
            match w.as_slice() {
                ["The", obj, "is", "in", "Box", b] => {
                    world.objects.push((*obj).to_owned());
                    world.initial.insert((*obj).to_owned(), (*b).to_owned());
                    note_box(b, &mut world.boxes);
                }
                ["Move", "the", obj, "from", "Box", from, "to", "Box", to] => {
                    note_box(from, &mut world.boxes);
                    note_box(to, &mut world.boxes);
                    world.moves.push(BoxMove { object: (*obj).into(), from: (*from).into(), to: (*to).into() });
                }
                _ => return None,
            }
        }
        world.boxes.sort();
        Some((world, query.to_owned()))
    }
}

/// Final box of `object`.
pub fn box_oracle(world: &BoxWorld, object: &str) -> Result<String, TaskError> {
    if !world.objects.iter().any(|o| o == object) {
        return Err(TaskError::UnknownObject(object.to_owned()));
    }
    Ok(world.final_locations()[object].clone())
}

pub(crate) fn box_instance(world: &BoxWorld, query: &str, seed: u64) -> Result<TaskInstance, TaskError> {
    let answer = box_oracle(world, query)?;
    Ok(TaskInstance {
        domain: Domain::BoxTracking,
        prompt: world.render(query),
        answer: AnswerSpec::SingleToken(format!(" {answer}")),
        meta: TaskMeta {
            num_states: world.boxes.len(),
            num_transitions: world.moves.len(),
            num_objects: Some(world.objects.len()),
            num_clues: None,
            seed,
            queried_entity: query.to_owned(),
        },
    })
}

/// Random box world with `num_moves` valid moves and a uniformly chosen
/// queried object.
pub fn render_box_tracking(
    num_boxes: usize,
    num_objects: usize,
    num_moves: usize,
    seed: u64,
) -> Result<(BoxWorld, TaskInstance), TaskError> {
    if num_boxes == 0 || num_boxes > MAX_BOXES {
        return Err(TaskError::InvalidParameter(format!("num_boxes must be in 1..={MAX_BOXES}, got {num_boxes}")));
    }
    if num_objects == 0 || num_objects > nouns().len() {
        return Err(TaskError::InvalidParameter(format!(
            "num_objects must be in 1..={}, got {num_objects}",
            nouns().len()
        )));
    }
    if num_moves > 0 && num_boxes == 1 {
        return Err(TaskError::NoValidMove);
    }
    let mut rng = rng_from_seed(seed);
    let boxes: Vec<String> = (0..num_boxes).map(box_letter).collect();
    let objects: Vec<String> =
        index::sample(&mut rng, nouns().len(), num_objects).into_iter().map(|i| nouns()[i].to_owned()).collect();
    let mut loc: BTreeMap<String, String> = BTreeMap::new();
    for o in &objects {
        loc.insert(o.clone(), boxes[rng.random_range(0..num_boxes)].clone());
    }
    let initial = loc.clone();
    let mut moves = Vec::with_capacity(num_moves);
    for _ in 0..num_moves {
        let object = objects[rng.random_range(0..num_objects)].clone();
        let from = loc[&object].clone();
        let from_idx = boxes.iter().position(|b| *b == from).expect("location is a box");
        // Uniform over the other boxes.
        let mut to_idx = rng.random_range(0..num_boxes - 1);
        if to_idx >= from_idx {
            to_idx += 1;
        }
        let to = boxes[to_idx].clone();
        loc.insert(object.clone(), to.clone());
        moves.push(BoxMove { object, from, to });
    }
    let query = objects[rng.random_range(0..num_objects)].clone();
    let world = BoxWorld { boxes, objects, initial, moves };
    let inst = box_instance(&world, &query, seed)?;
    Ok((world, inst))
}
