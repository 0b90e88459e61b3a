//! Split-text caption construction.
//!
//! Objects are reranked by (degree desc, caption frequency desc, original
//! position asc); relations and attributes follow the reranked object order.
//! Each primitive then becomes one templated sentence and the sentences are
//! laid out objects first, then relations, then attributes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption_graph::{node_degree, Attribute, CaptionParseGraph, Relation};

/// Sentence separator used when a split caption is fed to an encoder.
pub const SENTENCE_SEPARATOR: &str = ". ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PrimitiveKind {
    Object,
    Relation,
    Attribute,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [Self::Object, Self::Relation, Self::Attribute];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Object => "[OBJECT]",
            Self::Relation => "[RELATION]",
            Self::Attribute => "[ATTRIBUTE]",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Self::Object => 'O',
            Self::Relation => 'R',
            Self::Attribute => 'A',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'O' => Some(Self::Object),
            'R' => Some(Self::Relation),
            'A' => Some(Self::Attribute),
            _ => None,
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Object => "OBJECT",
            Self::Relation => "RELATION",
            Self::Attribute => "ATTRIBUTE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankKey {
    pub degree: usize,
    pub frequency: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RerankedSets {
    pub objects: Vec<String>,
    pub relations: Vec<Relation>,
    pub attributes: Vec<Attribute>,
    /// Aligned with `objects`.
    pub rank_keys: Vec<RankKey>,
    /// `order[new] = old` object index.
    pub order: Vec<usize>,
}

/// Case-insensitive whole-word occurrences of `phrase` in `text`.
pub fn phrase_frequency(text: &str, phrase: &str) -> usize {
    let words: Vec<String> = text
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let target: Vec<String> = phrase.split_whitespace().map(str::to_lowercase).collect();
    if target.is_empty() || target.len() > words.len() {
        return 0;
    }
    words.windows(target.len()).filter(|w| *w == target.as_slice()).count()
}

pub fn rerank_primitives(g: &CaptionParseGraph) -> RerankedSets {
    let keys: Vec<RankKey> = g
        .nodes
        .iter()
        .map(|n| RankKey {
            degree: node_degree(g, n.id).unwrap_or(0),
            frequency: phrase_frequency(&g.caption, &n.object),
        })
        .collect();
    let mut order: Vec<usize> = (0..g.nodes.len()).collect();
    // stable sort keeps original order on ties
    order.sort_by(|&a, &b| {
        keys[b]
            .degree
            .cmp(&keys[a].degree)
            .then(keys[b].frequency.cmp(&keys[a].frequency))
    });
    let id_to_old: std::collections::HashMap<usize, usize> =
        g.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut rank_of_old = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rank_of_old[old] = new;
    }
    let rank_of_id = |id: usize| rank_of_old[id_to_old[&id]];

    let mut relations: Vec<(usize, usize, Relation)> = g
        .edges
        .iter()
        .map(|e| {
            let (s, d) = (rank_of_id(e.src), rank_of_id(e.dst));
            (s.min(d), s.max(d), Relation::new(s, e.relation.clone(), d))
        })
        .collect();
    relations.sort_by_key(|(lo, hi, _)| (*lo, *hi));

    let mut attributes: Vec<Attribute> = g
        .nodes
        .iter()
        .flat_map(|n| n.attributes.iter().map(move |a| (n.id, a)))
        .map(|(id, a)| Attribute::new(rank_of_id(id), a.clone()))
        .collect();
    attributes.sort_by_key(|a| a.object);

    RerankedSets {
        objects: order.iter().map(|&i| g.nodes[i].object.clone()).collect(),
        relations: relations.into_iter().map(|(_, _, r)| r).collect(),
        attributes,
        rank_keys: order.iter().map(|&i| keys[i]).collect(),
        order,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimplifiedSentence {
    pub kind: PrimitiveKind,
    pub text: String,
    #[serde(skip)]
    pub refs: Vec<usize>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("{kind} sentence takes {expected} arguments, got {got}")]
    ArityMismatch { kind: PrimitiveKind, expected: usize, got: usize },
    #[error("malformed split caption document: {0}")]
    Document(String),
}

/// Renders one sentence. Arguments: object; subject, relation, object;
/// object, attribute.
pub fn render_sentence(kind: PrimitiveKind, args: &[&str]) -> Result<SimplifiedSentence, SplitError> {
    let expected = match kind {
        PrimitiveKind::Object => 1,
        PrimitiveKind::Relation => 3,
        PrimitiveKind::Attribute => 2,
    };
    if args.len() != expected {
        return Err(SplitError::ArityMismatch { kind, expected, got: args.len() });
    }
    let text = match kind {
        PrimitiveKind::Object => format!("[OBJECT] {}", args[0]),
        PrimitiveKind::Relation => format!("[RELATION] {} {} {}", args[0], args[1], args[2]),
        PrimitiveKind::Attribute => format!("[ATTRIBUTE] {} is {}", args[0], args[1]),
    };
    Ok(SimplifiedSentence { kind, text, refs: Vec::new() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitTextCaption {
    pub sentences: Vec<SimplifiedSentence>,
    pub source: CaptionParseGraph,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitDoc {
    sentences: Vec<SimplifiedSentence>,
}

impl SplitTextCaption {
    pub fn of_kind(&self, kind: PrimitiveKind) -> Vec<&SimplifiedSentence> {
        self.sentences.iter().filter(|s| s.kind == kind).collect()
    }

    pub fn plain_text(&self) -> String {
        join_sentences(self.sentences.iter())
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(&SplitDoc { sentences: self.sentences.clone() }).expect("serializable")
    }

    /// Reads the JSON export back; `refs` are not part of the export.
    pub fn from_json(bytes: &[u8], source: CaptionParseGraph) -> Result<Self, SplitError> {
        let doc: SplitDoc = serde_json::from_slice(bytes).map_err(|e| SplitError::Document(e.to_string()))?;
        for (i, s) in doc.sentences.iter().enumerate() {
            if !s.text.starts_with(s.kind.tag()) {
                return Err(SplitError::Document(format!("sentences[{i}] does not match its kind")));
            }
        }
        Ok(Self { sentences: doc.sentences, source })
    }

    /// Whitespace-token count of the joined text.
    pub fn token_count(&self) -> usize {
        self.plain_text().split_whitespace().count()
    }

    /// Drops whole sentences from the tail until the joined text fits
    /// `max_tokens`. Returns how many were dropped.
    pub fn fit_token_budget(&mut self, max_tokens: usize) -> usize {
        let mut dropped = 0;
        while !self.sentences.is_empty() && self.token_count() > max_tokens {
            self.sentences.pop();
            dropped += 1;
        }
        if dropped > 0 {
            log::warn!("split caption exceeds {max_tokens} tokens; dropped {dropped} trailing sentences");
        }
        dropped
    }
}

pub fn join_sentences<'a>(sentences: impl IntoIterator<Item = &'a SimplifiedSentence>) -> String {
    sentences.into_iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(SENTENCE_SEPARATOR)
}

pub fn construct_split_caption(r: &RerankedSets, source: &CaptionParseGraph) -> SplitTextCaption {
    let mut sentences = Vec::with_capacity(r.objects.len() + r.relations.len() + r.attributes.len());
    for (i, o) in r.objects.iter().enumerate() {
        let mut s = render_sentence(PrimitiveKind::Object, &[o]).expect("arity");
        s.refs = vec![i];
        sentences.push(s);
    }
    for rel in &r.relations {
        let mut s = render_sentence(
            PrimitiveKind::Relation,
            &[&r.objects[rel.subject], &rel.predicate, &r.objects[rel.object]],
        )
        .expect("arity");
        s.refs = vec![rel.subject, rel.object];
        sentences.push(s);
    }
    for a in &r.attributes {
        let mut s = render_sentence(PrimitiveKind::Attribute, &[&r.objects[a.object], &a.value]).expect("arity");
        s.refs = vec![a.object];
        sentences.push(s);
    }
    SplitTextCaption { sentences, source: source.clone() }
}

/// Rerank and construct in one call.
pub fn split_caption(g: &CaptionParseGraph) -> SplitTextCaption {
    construct_split_caption(&rerank_primitives(g), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption_graph::{assemble_graph, PrimitiveSets};

    fn teddy() -> CaptionParseGraph {
        let prims = PrimitiveSets {
            objects: vec!["teddy bear".into(), "ribbon".into()],
            relations: vec![Relation::new(0, "wearing", 1)],
            attributes: vec![Attribute::new(1, "red")],
        };
        assemble_graph("A teddy bear wearing a red ribbon around its neck", &prims).unwrap()
    }

    #[test]
    fn templates() {
        assert_eq!(render_sentence(PrimitiveKind::Object, &["ribbon"]).unwrap().text, "[OBJECT] ribbon");
        assert_eq!(
            render_sentence(PrimitiveKind::Relation, &["teddy bear", "wearing", "ribbon"]).unwrap().text,
            "[RELATION] teddy bear wearing ribbon"
        );
        assert_eq!(
            render_sentence(PrimitiveKind::Attribute, &["ribbon", "red"]).unwrap().text,
            "[ATTRIBUTE] ribbon is red"
        );
        assert!(matches!(
            render_sentence(PrimitiveKind::Relation, &["a", "b"]),
            Err(SplitError::ArityMismatch { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn teddy_bear_split() {
        let split = split_caption(&teddy());
        let texts: Vec<&str> = split.sentences.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "[OBJECT] teddy bear",
                "[OBJECT] ribbon",
                "[RELATION] teddy bear wearing ribbon",
                "[ATTRIBUTE] ribbon is red"
            ]
        );
        assert_eq!(
            split.plain_text(),
            "[OBJECT] teddy bear. [OBJECT] ribbon. [RELATION] teddy bear wearing ribbon. [ATTRIBUTE] ribbon is red"
        );
        let back = SplitTextCaption::from_json(&split.to_json(), split.source.clone()).unwrap();
        assert_eq!(back.plain_text(), split.plain_text());
    }

    #[test]
    fn rank_by_degree_then_frequency() {
        // A: degree 2, freq 1; B: degree 1, freq 3; C: degree 1, freq 1
        let prims = PrimitiveSets {
            objects: vec!["cup".into(), "dog".into(), "ant".into()],
            relations: vec![Relation::new(2, "on", 0), Relation::new(0, "beside", 1)],
            attributes: vec![],
        };
        // listed C, B, A in caption order to make sure the sort does the work
        let prims = PrimitiveSets {
            objects: vec![prims.objects[2].clone(), prims.objects[1].clone(), prims.objects[0].clone()],
            relations: vec![Relation::new(0, "on", 2), Relation::new(2, "beside", 1)],
            attributes: vec![],
        };
        let g = assemble_graph("ant on cup beside dog, dog, dog", &prims).unwrap();
        let r = rerank_primitives(&g);
        assert_eq!(r.objects, vec!["cup", "dog", "ant"]);
        assert_eq!(r.rank_keys[0], RankKey { degree: 2, frequency: 1 });
        assert_eq!(r.rank_keys[1], RankKey { degree: 1, frequency: 3 });
        // relations follow the new object order, direction preserved
        assert_eq!(r.relations, vec![Relation::new(0, "beside", 1), Relation::new(2, "on", 0)]);
    }

    #[test]
    fn ties_keep_caption_order() {
        let prims = PrimitiveSets { objects: vec!["bird".into(), "tree".into()], ..Default::default() };
        let g = assemble_graph("a bird and a tree", &prims).unwrap();
        assert_eq!(rerank_primitives(&g).objects, vec!["bird", "tree"]);
        let prims = PrimitiveSets { objects: vec!["bird".into()], ..Default::default() };
        let g = assemble_graph("a bird", &prims).unwrap();
        assert_eq!(rerank_primitives(&g).objects, vec!["bird"]);
    }

    #[test]
    fn counting_contract() {
        let prims = PrimitiveSets {
            objects: vec!["a".into(), "b".into(), "c".into()],
            relations: vec![],
            attributes: vec![Attribute::new(0, "red"), Attribute::new(2, "big")],
        };
        let split = split_caption(&assemble_graph("a b c", &prims).unwrap());
        let kinds: String = split.sentences.iter().map(|s| s.kind.letter()).collect();
        assert_eq!(kinds, "OOOAA");
        assert!(split_caption(&CaptionParseGraph::default()).sentences.is_empty());
    }

    #[test]
    fn frequency_is_whole_word() {
        assert_eq!(phrase_frequency("A cat and a Cat; concatenate cats", "cat"), 2);
        assert_eq!(phrase_frequency("the teddy bear hugs a teddy bear", "teddy bear"), 2);
    }

    #[test]
    fn budget_drops_tail_sentences() {
        let mut split = split_caption(&teddy());
        assert_eq!(split.token_count(), 14);
        assert_eq!(split.fit_token_budget(10), 1);
        assert_eq!(split.sentences.last().unwrap().kind, PrimitiveKind::Relation);
    }
}
