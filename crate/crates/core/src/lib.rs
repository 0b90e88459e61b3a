//! Split-text conditioning toolkit for diffusion transformers.
//!
//! The crate turns a free-form caption into a graph of semantic primitives
//! (objects, relations, attributes), renders a hierarchical split-text caption
//! from that graph, builds the conditioning token sequence consumed by a toy
//! multimodal diffusion transformer, derives primitive injection timesteps from
//! denoising traces, and trains the toy model with a flow-matching plus
//! attention-alignment objective.
//!
//! Pipeline stages map onto modules:
//!
//! | stage      | module                |
//! |------------|-----------------------|
//! | parse      | [`caption_parser`]    |
//! | graph      | [`caption_graph`]     |
//! | split      | [`split_text`]        |
//! | encode     | [`token_encoding`]    |
//! | schedule   | [`injection_schedule`]|
//! | simulate   | [`toy_denoiser`]      |
//! | train      | [`training`]          |
//! | run/report | [`pipeline`], [`report`] |

pub mod autodiff;
pub mod caption_graph;
pub mod caption_parser;
pub mod injection_schedule;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod split_text;
pub mod tensor_io;
pub mod token_encoding;
pub mod toy_denoiser;
pub mod training;

pub use caption_graph::{
    assemble_graph, decode_graph_json, encode_graph_json, node_degree, validate_graph,
    Attribute, CaptionParseGraph, GraphEdge, GraphError, GraphNode, PrimitiveSets, Relation,
    ValidationReport,
};
pub use caption_parser::{parse_rule_based, GrammarError};
pub use injection_schedule::{
    build_schedule, DenoiseTrace, InjectionSchedule, ScheduleConfig, ScheduleError, StepRecord,
};
pub use split_text::{
    construct_split_caption, rerank_primitives, PrimitiveKind, RerankedSets, SimplifiedSentence,
    SplitTextCaption,
};
pub use token_encoding::{EncoderBank, EncoderSpec, TokenSequence};
pub use toy_denoiser::{InjectionPlan, NoiseSchedule, PrimitiveGroups, ToyModel, ToyModelConfig};
