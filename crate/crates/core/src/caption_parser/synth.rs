//! Random captions in the mini-grammar, for fuzzing and synthetic training data.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{ADJECTIVES, DETERMINERS, RELATIONS};

pub const NOUNS: &[&str] = &[
    "ball", "table", "cat", "dog", "man", "woman", "hat", "chair", "tree", "car", "cup", "book",
    "bird", "box", "lamp", "bench", "horse", "girl", "boy", "flower", "vase", "kite", "clock",
    "bottle", "coffee", "shirt", "bag", "window", "door", "rug",
];

fn phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<String>) {
    if rng.random_bool(0.8) {
        out.push(DETERMINERS.choose(rng).expect("non-empty").to_string());
    }
    for _ in 0..rng.random_range(0..=2) {
        out.push(ADJECTIVES.choose(rng).expect("non-empty").to_string());
    }
    for _ in 0..rng.random_range(1..=2) {
        out.push(NOUNS.choose(rng).expect("non-empty").to_string());
    }
}

/// A caption with one to four noun phrases joined by relations.
pub fn random_caption<R: Rng + ?Sized>(rng: &mut R) -> String {
    let mut words = Vec::new();
    phrase(rng, &mut words);
    for _ in 0..rng.random_range(0..=3) {
        words.push(RELATIONS.choose(rng).expect("non-empty").to_string());
        phrase(rng, &mut words);
    }
    let mut s = words.join(" ");
    if rng.random_bool(0.3) {
        s.push('.');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption_parser::parse_rule_based;
    use crate::rng::SeedTree;

    #[test]
    fn generated_captions_parse() {
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..500 {
            let c = random_caption(&mut rng);
            let p = parse_rule_based(&c).unwrap_or_else(|e| panic!("{c:?}: {e}"));
            assert!(!p.objects.is_empty());
        }
    }
}
