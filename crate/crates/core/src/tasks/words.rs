// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shipped vocabularies for rendered prompts.

use std::sync::OnceLock;

fn lines(raw: &'static str) -> Vec<&'static str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Object nouns for box tracking (50 entries, starting hat, glove, ball, watch).
pub fn nouns() -> &'static [&'static str] {
    static CELL: OnceLock<Vec<&'static str>> = OnceLock::new();
    CELL.get_or_init(|| lines(include_str!("../../data/nouns.txt")))
}

/// Person names for the fruit store.
pub fn names() -> &'static [&'static str] {
    static CELL: OnceLock<Vec<&'static str>> = OnceLock::new();
    CELL.get_or_init(|| lines(include_str!("../../data/names.txt")))
}

/// Fruit nouns for the fruit store.
pub fn fruits() -> &'static [&'static str] {
    static CELL: OnceLock<Vec<&'static str>> = OnceLock::new();
    CELL.get_or_init(|| lines(include_str!("../../data/fruits.txt")))
}

/// Box labels `A`..`Z`.
pub fn box_letter(i: usize) -> String {
    assert!(i < 26, "box index {i} out of range");
    ((b'A' + i as u8) as char).to_string()
}

pub const MAX_BOXES: usize = 26;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_lists_are_distinct() {
        for list in [nouns(), names(), fruits()] {
            let mut v = list.to_vec();
            v.sort();
            v.dedup();
            assert_eq!(v.len(), list.len());
        }
        assert_eq!(nouns().len(), 50);
        assert_eq!(&nouns()[..4], &["hat", "glove", "ball", "watch"]);
    }
}
