//! Conditioning token sequences.
//!
//! Three toy encoders stand in for the CLIP-L/14, CLIP-G/14 and T5 text
//! encoders of a multimodal diffusion transformer. The split caption is encoded
//! by all three; the two CLIP-like sequences are concatenated along the feature
//! axis together with a linear projection of the complete caption's T5-like
//! sequence, filling the width `D` exactly, and the T5-like split sequence is
//! appended along the length axis:
//!
//! ```text
//! T_concat = [ T_L | T_G | proj(T5(complete)) ]     L x D
//! T        = [ T_concat ; T5(split) ]               2L x D
//! ```

use std::ops::Range;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeedTree;
use crate::split_text::{join_sentences, PrimitiveKind, SimplifiedSentence, SplitTextCaption};

pub const DEFAULT_MAX_LEN: usize = 77;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn new(name: &str, dim: usize, max_len: usize, seed: u64) -> Self {
        Self { name: name.to_string(), dim, max_len, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `len x dim`
    pub tokens: Array2<f64>,
    pub provenance: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("encoder widths do not partition D: {0}")]
    DimMismatch(String),
    #[error("primitive group mixes sentence kinds")]
    MixedKinds,
    #[error("primitive group is empty")]
    EmptyGroup,
}

fn token_vector(spec: &EncoderSpec, position: usize, token: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"toy-encoder");
    h.update((spec.name.len() as u64).to_le_bytes());
    h.update(spec.name.as_bytes());
    h.update(spec.seed.to_le_bytes());
    h.update((position as u64).to_le_bytes());
    h.update(token.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Whitespace tokens, truncated to `max_len`, each mapped through a keyed hash
/// to a standard-normal vector of width `dim`.
pub fn toy_encode(text: &str, spec: &EncoderSpec) -> Result<TokenSequence, EncodingError> {
    if text.trim().is_empty() {
        return Err(EncodingError::EmptyText);
    }
    let tokens: Vec<&str> = text.split_whitespace().take(spec.max_len).collect();
    let mut out = Array2::zeros((tokens.len(), spec.dim));
    for (pos, tok) in tokens.iter().enumerate() {
        let mut rng = token_vector(spec, pos, tok);
        for v in out.row_mut(pos).iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    Ok(TokenSequence { tokens: out, provenance: format!("{}:{:?}", spec.name, truncate_label(text)) })
}

fn truncate_label(text: &str) -> String {
    text.chars().take(48).collect()
}

/// The three toy encoders plus the complete-caption projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBank {
    pub clip_l: EncoderSpec,
    pub clip_g: EncoderSpec,
    /// Width of this encoder is the model width `D`.
    pub t5: EncoderSpec,
    /// `D x D'` with `D' = D - D_L - D_G`.
    pub proj: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub clip_l: usize,
    pub clip_g: usize,
    pub model: usize,
    pub max_len: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self { clip_l: 8, clip_g: 16, model: 32, max_len: DEFAULT_MAX_LEN }
    }
}

impl EncoderBank {
    pub fn new(dims: &EncoderDims, seeds: &SeedTree) -> Result<Self, EncodingError> {
        let d_prime = residual_width(dims.clip_l, dims.clip_g, dims.model)?;
        let mut rng = seeds.child("proj").rng();
        let scale = 1.0 / (dims.model as f64).sqrt();
        let proj = Array2::from_shape_simple_fn((dims.model, d_prime), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Ok(Self {
            clip_l: EncoderSpec::new("clip-l", dims.clip_l, dims.max_len, seeds.child("clip-l").as_u64()),
            clip_g: EncoderSpec::new("clip-g", dims.clip_g, dims.max_len, seeds.child("clip-g").as_u64()),
            t5: EncoderSpec::new("t5", dims.model, dims.max_len, seeds.child("t5").as_u64()),
            proj,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.t5.dim
    }

    pub fn max_len(&self) -> usize {
        self.clip_l.max_len.max(self.clip_g.max_len).max(self.t5.max_len)
    }

    pub fn check_dims(&self) -> Result<usize, EncodingError> {
        let d_prime = residual_width(self.clip_l.dim, self.clip_g.dim, self.t5.dim)?;
        if self.proj.dim() != (self.t5.dim, d_prime) {
            return Err(EncodingError::DimMismatch(format!(
                "projection is {:?}, expected ({}, {d_prime})",
                self.proj.dim(),
                self.t5.dim
            )));
        }
        Ok(d_prime)
    }

    fn project(&self, t5_seq: &TokenSequence) -> Array2<f64> {
        t5_seq.tokens.dot(&self.proj)
    }
}

fn residual_width(l: usize, g: usize, d: usize) -> Result<usize, EncodingError> {
    if l == 0 || g == 0 || l + g >= d {
        return Err(EncodingError::DimMismatch(format!(
            "D_L={l}, D_G={g}, D={d} leaves no room for the complete-caption block"
        )));
    }
    Ok(d - l - g)
}

fn pad_rows(m: &Array2<f64>, rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, m.ncols()));
    let take = rows.min(m.nrows());
    out.slice_mut(s![..take, ..]).assign(&m.slice(s![..take, ..]));
    out
}

/// Feature-axis concatenation of the two CLIP-like encodings of `text` with a
/// projected T5-like block taken from `projected_source`.
fn concat_block(
    text: &str,
    projected_source: &str,
    bank: &EncoderBank,
) -> Result<(Array2<f64>, TokenSequence), EncodingError> {
    bank.check_dims()?;
    let l = toy_encode(text, &bank.clip_l)?;
    let g = toy_encode(text, &bank.clip_g)?;
    let t5 = toy_encode(text, &bank.t5)?;
    let len = l.len().max(g.len()).max(t5.len());
    let projected = bank.project(&toy_encode(projected_source, &bank.t5)?);
    let block = concatenate(
        Axis(1),
        &[pad_rows(&l.tokens, len).view(), pad_rows(&g.tokens, len).view(), pad_rows(&projected, len).view()],
    )
    .expect("row counts agree");
    Ok((block, TokenSequence { tokens: pad_rows(&t5.tokens, len), provenance: t5.provenance }))
}

/// Builds the `2L x D` conditioning sequence from a split caption and the
/// complete caption it came from.
pub fn build_input_sequence(
    split: &SplitTextCaption,
    complete: &str,
    bank: &EncoderBank,
) -> Result<TokenSequence, EncodingError> {
    let text = split.plain_text();
    let (concat, t5_split) = concat_block(&text, complete, bank)?;
    let tokens = concatenate(Axis(0), &[concat.view(), t5_split.tokens.view()]).expect("widths agree");
    Ok(TokenSequence { tokens, provenance: "T".to_string() })
}

/// Encodes one primitive group (all sentences of a single kind) into an
/// `L x D` injection sequence.
pub fn encode_primitive_group(
    group: &[SimplifiedSentence],
    bank: &EncoderBank,
) -> Result<TokenSequence, EncodingError> {
    let first = group.first().ok_or(EncodingError::EmptyGroup)?;
    if group.iter().any(|s| s.kind != first.kind) {
        return Err(EncodingError::MixedKinds);
    }
    let text = join_sentences(group);
    let (block, _) = concat_block(&text, &text, bank)?;
    Ok(TokenSequence { tokens: block, provenance: format!("prim:{}", first.kind) })
}

/// Token positions of each sentence inside the joined split text, clipped to
/// the encoder length `max_len`.
pub fn sentence_token_spans(sentences: &[SimplifiedSentence], max_len: usize) -> Vec<Range<usize>> {
    let mut start = 0;
    sentences
        .iter()
        .map(|s| {
            let n = s.text.split_whitespace().count();
            let span = start.min(max_len)..(start + n).min(max_len);
            start += n;
            span
        })
        .collect()
}

/// Union of token positions, within the split-text half of `T`, of all
/// sentences of the given kinds. Positions are relative to the start of that
/// half.
pub fn kind_token_positions(split: &SplitTextCaption, kinds: &[PrimitiveKind], max_len: usize) -> Vec<usize> {
    sentence_token_spans(&split.sentences, max_len)
        .into_iter()
        .zip(&split.sentences)
        .filter(|(_, s)| kinds.contains(&s.kind))
        .flat_map(|(r, _)| r)
        .collect()
}
