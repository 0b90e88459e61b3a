//! Caption parsing into primitive sets.
//!
//! Two producers share one output type: an LLM-backed parser (see [`llm`])
//! and a deterministic rule-based parser over a controlled mini-grammar,
//!
//! ```text
//! caption := phrase (RELATION phrase)*
//! phrase  := [DET] ADJ* NOUN+
//! ```
//!
//! where `RELATION` and `DET` come from fixed lexicons, `ADJ` from a fixed
//! adjective lexicon, and `NOUN` is any other word. Adjectives attach to the
//! noun that closes their phrase; a relation links the phrases on either side.

pub mod llm;
pub mod synth;

use std::collections::HashMap;

use thiserror::Error;

use crate::caption_graph::{Attribute, PrimitiveSets, Relation};

pub use llm::{
    llm_complete, parse_llm_payload, parse_with_llm, ChatTransport, HttpTransport, LlmClient,
    LlmError, LlmRequest, LlmResponse, NetPolicy, ParserCache, SYSTEM_PROMPT,
};

pub const DETERMINERS: &[&str] =
    &["a", "an", "the", "some", "this", "that", "its", "his", "her", "their"];

/// Relation lexicon, multi-word entries first so matching is longest-first.
pub const RELATIONS: &[&str] =
    &["in front of", "next to", "on", "under", "wearing", "holding", "beside", "behind"];

pub const ADJECTIVES: &[&str] = &[
    // colour
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white",
    "gray", "grey", "golden", "silver",
    // size and shape
    "big", "small", "large", "tiny", "huge", "tall", "short", "long", "round", "square", "thin",
    "thick", "wide", "narrow",
    // material and texture
    "wooden", "metal", "glass", "plastic", "stone", "leather", "furry", "fluffy", "shiny",
    "soft", "rough", "smooth", "striped", "spotted",
    // state and age
    "old", "young", "new", "broken", "empty", "full", "wet", "dry", "hot", "cold", "bright",
    "dark", "happy", "sleepy", "cute",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("grammar error at byte {offset}: {message}")]
pub struct GrammarError {
    pub offset: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WordClass {
    Det,
    Adj,
    Noun,
}

fn classify(word: &str) -> WordClass {
    if DETERMINERS.contains(&word) {
        WordClass::Det
    } else if ADJECTIVES.contains(&word) {
        WordClass::Adj
    } else {
        WordClass::Noun
    }
}

struct Token<'a> {
    offset: usize,
    text: &'a str,
    lower: String,
}

fn tokenize(caption: &str) -> Result<Vec<Token<'_>>, GrammarError> {
    let body = caption.trim_end();
    let body = body.strip_suffix('.').unwrap_or(body);
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in body.char_indices().chain(std::iter::once((body.len(), ' '))) {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                let text = &body[s..i];
                out.push(Token { offset: s, text, lower: text.to_lowercase() });
            }
        } else if c.is_alphabetic() || c == '-' || c == '\'' {
            start.get_or_insert(i);
        } else {
            return Err(GrammarError { offset: i, message: format!("unexpected character {c:?}") });
        }
    }
    Ok(out)
}

/// Length in tokens of the relation starting at `tokens[i]`, if any.
fn relation_at(tokens: &[Token<'_>], i: usize) -> Option<(usize, &'static str)> {
    RELATIONS.iter().find_map(|rel| {
        let words: Vec<&str> = rel.split(' ').collect();
        let fits = tokens.len() >= i + words.len()
            && words.iter().zip(&tokens[i..]).all(|(w, t)| t.lower == *w);
        fits.then_some((words.len(), *rel))
    })
}

struct Phrase {
    noun: String,
    adjectives: Vec<String>,
}

/// Parses a caption in the controlled mini-grammar.
pub fn parse_rule_based(caption: &str) -> Result<PrimitiveSets, GrammarError> {
    let tokens = tokenize(caption)?;
    let end = caption.trim_end().len();
    let mut phrases: Vec<Phrase> = Vec::new();
    let mut predicates: Vec<&'static str> = Vec::new();
    let mut i = 0;
    loop {
        // one phrase
        if i < tokens.len() && classify(&tokens[i].lower) == WordClass::Det && relation_at(&tokens, i).is_none() {
            i += 1;
        }
        let mut adjectives = Vec::new();
        let mut noun: Vec<&str> = Vec::new();
        while i < tokens.len() && relation_at(&tokens, i).is_none() {
            let t = &tokens[i];
            match (classify(&t.lower), noun.is_empty()) {
                (WordClass::Adj, true) => adjectives.push(t.lower.clone()),
                (WordClass::Noun, _) => noun.push(&t.lower),
                (WordClass::Det, _) | (WordClass::Adj, false) => {
                    return Err(GrammarError {
                        offset: t.offset,
                        message: format!("unexpected {:?} inside a noun phrase", t.text),
                    })
                }
            }
            i += 1;
        }
        if noun.is_empty() {
            let offset = tokens.get(i).map_or(end, |t| t.offset);
            return Err(GrammarError { offset, message: "expected a noun".into() });
        }
        phrases.push(Phrase { noun: noun.join(" "), adjectives });
        match relation_at(&tokens, i) {
            Some((len, rel)) => {
                predicates.push(rel);
                i += len;
            }
            None => break,
        }
    }
    Ok(merge_phrases(&phrases, &predicates))
}

fn merge_phrases(phrases: &[Phrase], predicates: &[&str]) -> PrimitiveSets {
    let mut prims = PrimitiveSets::default();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut ids = Vec::with_capacity(phrases.len());
    for p in phrases {
        let id = *index.entry(p.noun.as_str()).or_insert_with(|| {
            prims.objects.push(p.noun.clone());
            prims.objects.len() - 1
        });
        ids.push(id);
        for a in &p.adjectives {
            let attr = Attribute::new(id, a.clone());
            if !prims.attributes.contains(&attr) {
                prims.attributes.push(attr);
            }
        }
    }
    for (k, pred) in predicates.iter().enumerate() {
        let rel = Relation::new(ids[k], *pred, ids[k + 1]);
        if !prims.relations.contains(&rel) {
            prims.relations.push(rel);
        }
    }
    prims
}
