// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenizers.
//!
//! [`WordTokenizer`] is the closed-vocabulary tokenizer of the synthetic
//! model. It splits text GPT-2 style into words with their leading space,
//! digit runs, punctuation marks and whitespace runs, and knows every word
//! the task renderers can emit. Anything else maps to `<unk>` (id 0).

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use super::ModelError;
use crate::dfa::{ActionId, StateId, MAX_LABELS};
use crate::tasks::words;

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError>;
}

impl<T: Tokenizer + ?Sized> Tokenizer for &T {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        (**self).tokenize(text)
    }
}

pub const UNK: u32 = 0;
const UNK_PIECE: &str = "<unk>";

const TEMPLATE_WORDS: &[&str] = &[
    "Start", "at", "state", "Take", "action", "go", "to", "The", "is", "in", "the", "Box", "Move", "from", "walk",
    "into", "a", "fruit", "store", "There", "are", "only", "fruits", "Each", "person", "gets", "different", "takes",
    "gives", "can", "have",
];

#[derive(Debug)]
pub struct WordTokenizer {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
    splitter: Regex,
}

impl WordTokenizer {
    /// Shared instance covering every task vocabulary.
    pub fn standard() -> &'static WordTokenizer {
        static CELL: OnceLock<WordTokenizer> = OnceLock::new();
        CELL.get_or_init(WordTokenizer::build)
    }

    fn build() -> WordTokenizer {
        let mut tok = WordTokenizer {
            pieces: Vec::new(),
            ids: HashMap::new(),
            splitter: Regex::new(r" ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]|\s+").expect("valid regex"),
        };
        tok.push(UNK_PIECE.to_owned());
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| (*w).to_owned()).collect();
        for i in 0..MAX_LABELS {
            words.push(StateId::nth(i).expect("label in range").0);
            words.push(ActionId::nth(i).expect("label in range").0);
        }
        words.extend(words::nouns().iter().map(|w| (*w).to_owned()));
        words.extend(words::names().iter().map(|w| (*w).to_owned()));
        words.extend(words::fruits().iter().map(|w| (*w).to_owned()));
        words.extend((0..=100).map(|n| n.to_string()));
        for w in words {
            tok.push(format!(" {w}"));
            tok.push(w);
        }
        for p in [".", ",", ":", "\n", " "] {
            tok.push(p.to_owned());
        }
        tok
    }

    fn push(&mut self, piece: String) {
        if !self.ids.contains_key(&piece) {
            self.ids.insert(piece.clone(), self.pieces.len() as u32);
            self.pieces.push(piece);
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        self.pieces.get(id as usize).map(String::as_str).unwrap_or(UNK_PIECE)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.splitter.find_iter(text).map(|m| self.id(m.as_str()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.piece(i)).collect()
    }
}

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        Ok(self.encode(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_splits() {
        let t = WordTokenizer::standard();
        assert!(t.encode("").is_empty());
        assert_eq!(t.encode("a A b").len(), 3);
        let ids = t.encode(" b");
        assert_eq!(ids.len(), 1);
        assert_eq!(t.piece(ids[0]), " b");
        let p = "Start at state a. Take action M, go to state";
        let ids = t.encode(p);
        assert_eq!(ids.len(), 12);
        assert!(!ids.contains(&UNK));
        assert_eq!(t.decode(&ids), p);
    }

    #[test]
    fn task_vocab_round_trips() {
        let t = WordTokenizer::standard();
        let p = "Kate, Sarah walk into a fruit store. There are only 2 fruits: grape, apple. Each person gets a different fruit. Sarah gives Kate the grape. Sarah can have the";
        let ids = t.encode(p);
        assert!(!ids.contains(&UNK));
        assert_eq!(t.decode(&ids), p);
        let b = "The hat is in Box A. Move the hat from Box A to Box B. The hat is in the Box";
        assert_eq!(t.decode(&t.encode(b)), b);
        assert_eq!(t.encode(" zzz"), vec![UNK]);
        assert_eq!(t.encode(" Hello"), vec![UNK]);
    }
}
