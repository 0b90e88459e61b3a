//! Toy multimodal diffusion transformer.
//!
//! `M` blocks over a `P x D` latent token grid. Each block runs self-attention,
//! cross-attention to the conditioning sequence `T`, an injection
//! cross-attention sublayer that only sees the currently active primitive
//! tokens, and a tanh feed-forward layer, all residual. The network predicts
//! the rectified-flow velocity `eps - x0` along `x_sigma = (1 - sigma) x0 + sigma eps`.
//!
//! Forward passes are recorded on an [`autodiff::Tape`](crate::autodiff::Tape)
//! so the same code serves simulation and training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::injection_schedule::{DenoiseTrace, InjectionSchedule, StepRecord};
use crate::rng::SeedTree;
use crate::split_text::{PrimitiveKind, SplitTextCaption};
use crate::token_encoding::{encode_primitive_group, EncoderBank, EncodingError, TokenSequence};

/// Width of the noise-level feature row fed into the input projection.
pub const TIME_FEATURES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("injection needs at least one primitive token")]
    EmptyPrimitives,
    #[error("latent became non-finite at step {step}")]
    NonFiniteLatent { step: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid injection order {0:?}")]
    BadOrder(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub latent_tokens: usize,
    pub dim: usize,
    pub ff_hidden: usize,
    /// Which blocks carry the injection sublayer; empty means all of them.
    pub inject_blocks: Vec<bool>,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { blocks: 2, heads: 2, latent_tokens: 16, dim: 32, ff_hidden: 64, inject_blocks: Vec::new() }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.blocks == 0 || self.heads == 0 || self.latent_tokens == 0 || self.dim == 0 || self.ff_hidden == 0 {
            return Err(SimError::Config("all sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(SimError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !self.inject_blocks.is_empty() && self.inject_blocks.len() != self.blocks {
            return Err(SimError::Config(format!(
                "inject_blocks has {} entries for {} blocks",
                self.inject_blocks.len(),
                self.blocks
            )));
        }
        Ok(())
    }

    pub fn injects(&self, block: usize) -> bool {
        self.inject_blocks.get(block).copied().unwrap_or(true)
    }

    pub fn injection_layers(&self) -> usize {
        (0..self.blocks).filter(|b| self.injects(*b)).count()
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    self_attn: AttnIdx,
    cond: AttnIdx,
    inject: Option<AttnIdx>,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    w_in: usize,
    b_in: usize,
    w_time: usize,
    blocks: Vec<BlockIdx>,
    w_mod: usize,
    w_out: usize,
    b_out: usize,
}

/// Parameters of the toy transformer, stored in a fixed order.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Array2<f64>>,
    layout: Layout,
}

impl PartialEq for ToyModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

struct Builder<'a> {
    seeds: Option<&'a SeedTree>,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize, gain: f64) -> usize {
        let m = match self.seeds {
            Some(seeds) => {
                let mut rng = seeds.child(&name).rng();
                let scale = gain / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
            }
            None => Array2::zeros((rows, cols)),
        };
        self.push(name, m)
    }

    fn bias(&mut self, name: String, cols: usize) -> usize {
        self.push(name, Array2::zeros((1, cols)))
    }

    fn push(&mut self, name: String, m: Array2<f64>) -> usize {
        self.names.push(name);
        self.params.push(m);
        self.params.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.weight(format!("{prefix}.wq"), d, d, 1.0),
            k: self.weight(format!("{prefix}.wk"), d, d, 1.0),
            v: self.weight(format!("{prefix}.wv"), d, d, 1.0),
            o: self.weight(format!("{prefix}.wo"), d, d, 0.5),
        }
    }
}

/// Everything one forward pass exposes.
pub struct Forward {
    pub velocity: Var,
    /// `[block][head]` conditioning attention maps, `P x len(T)`.
    pub cond_maps: Vec<Vec<Var>>,
    /// `[injecting block][head]` injection maps, `P x K`; `None` when no
    /// primitive was active.
    pub inject_maps: Option<Vec<Vec<Var>>>,
}

impl ToyModel {
    /// Randomly initialised model; every tensor draws from its own named seed.
    pub fn new(config: ToyModelConfig, seeds: &SeedTree) -> Result<Self, SimError> {
        Self::build(config, Some(seeds))
    }

    /// All-zero weights; predicts zero velocity everywhere.
    pub fn zeroed(config: ToyModelConfig) -> Result<Self, SimError> {
        Self::build(config, None)
    }

    fn build(config: ToyModelConfig, seeds: Option<&SeedTree>) -> Result<Self, SimError> {
        config.validate()?;
        let d = config.dim;
        let f = config.ff_hidden;
        let mut b = Builder { seeds, names: Vec::new(), params: Vec::new() };
        let w_in = b.weight("in.w".into(), d, d, 1.0);
        let b_in = b.bias("in.b".into(), d);
        let w_time = b.weight("time.w".into(), TIME_FEATURES, d, 1.0);
        let blocks = (0..config.blocks)
            .map(|i| BlockIdx {
                self_attn: b.attn(&format!("block{i}.self"), d),
                cond: b.attn(&format!("block{i}.cond"), d),
                inject: config.injects(i).then(|| b.attn(&format!("block{i}.inject"), d)),
                ff_w1: b.weight(format!("block{i}.ff.w1"), d, f, 1.0),
                ff_b1: b.bias(format!("block{i}.ff.b1"), f),
                ff_w2: b.weight(format!("block{i}.ff.w2"), f, d, 0.5),
                ff_b2: b.bias(format!("block{i}.ff.b2"), d),
            })
            .collect();
        // Noise-level gain on the final hidden state, zero at initialisation.
        let w_mod = b.push("out.mod".into(), Array2::zeros((TIME_FEATURES, d)));
        let w_out = b.weight("out.w".into(), d, d, 1.0);
        let b_out = b.bias("out.b".into(), d);
        let layout = Layout { w_in, b_in, w_time, blocks, w_mod, w_out, b_out };
        Ok(Self { config, names: b.names, params: b.params, layout })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Puts every parameter on `tape` as a leaf, in storage order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Velocity prediction for latent `x` at noise level `sigma`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        sigma: f64,
        cond: Var,
        prim: Option<Var>,
    ) -> Result<Forward, SimError> {
        let d = self.config.dim;
        let (p, xd) = tape.value(x).dim();
        if xd != d || tape.value(cond).ncols() != d {
            return Err(SimError::Dims(format!("latent width {xd} / conditioning width {} vs D={d}", tape.value(cond).ncols())));
        }
        if p != self.config.latent_tokens {
            return Err(SimError::Dims(format!("latent has {p} tokens, model expects {}", self.config.latent_tokens)));
        }
        if let Some(pv) = prim {
            let k = tape.value(pv);
            if k.nrows() == 0 {
                return Err(SimError::EmptyPrimitives);
            }
            if k.ncols() != d {
                return Err(SimError::Dims(format!("primitive width {} vs D={d}", k.ncols())));
            }
        }
        let l = &self.layout;
        let feats = tape.leaf(time_features(sigma));
        let t_row = tape.matmul(feats, params[l.w_time]);
        let mut h = tape.matmul(x, params[l.w_in]);
        h = tape.add_row(h, params[l.b_in]);
        h = tape.add_row(h, t_row);

        let mut cond_maps = Vec::with_capacity(l.blocks.len());
        let mut inject_maps = prim.map(|_| Vec::new());
        for blk in &l.blocks {
            let (a, _) = attention(tape, params, &blk.self_attn, self.config.heads, h, h);
            h = tape.add(h, a);
            let (a, maps) = attention(tape, params, &blk.cond, self.config.heads, h, cond);
            h = tape.add(h, a);
            cond_maps.push(maps);
            if let (Some(idx), Some(pv)) = (&blk.inject, prim) {
                let (a, maps) = attention(tape, params, idx, self.config.heads, h, pv);
                h = tape.add(h, a);
                inject_maps.as_mut().expect("set when prim is").push(maps);
            }
            let z = tape.matmul(h, params[blk.ff_w1]);
            let z = tape.add_row(z, params[blk.ff_b1]);
            let z = tape.tanh(z);
            let z = tape.matmul(z, params[blk.ff_w2]);
            let z = tape.add_row(z, params[blk.ff_b2]);
            h = tape.add(h, z);
        }
        let gain = tape.matmul(feats, params[l.w_mod]);
        let ones = tape.leaf(Array2::ones((1, d)));
        let gain = tape.add(gain, ones);
        let h = tape.mul_row(h, gain);
        let v = tape.matmul(h, params[l.w_out]);
        let velocity = tape.add_row(v, params[l.b_out]);
        Ok(Forward { velocity, cond_maps, inject_maps })
    }

    /// One injection sublayer applied on its own: queries from `hidden`,
    /// keys and values from `prim`. Returns the residual output and one
    /// `P x K` map per head.
    pub fn cross_attention_inject(
        &self,
        block: usize,
        hidden: &Array2<f64>,
        prim: &TokenSequence,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>), SimError> {
        if prim.is_empty() {
            return Err(SimError::EmptyPrimitives);
        }
        if hidden.ncols() != self.config.dim || prim.dim() != self.config.dim {
            return Err(SimError::Dims(format!("hidden {:?} / prim width {}", hidden.dim(), prim.dim())));
        }
        let idx = self
            .layout
            .blocks
            .get(block)
            .and_then(|b| b.inject)
            .ok_or_else(|| SimError::Config(format!("block {block} has no injection sublayer")))?;
        let mut tape = Tape::new();
        let params = self.leaves(&mut tape);
        let h = tape.leaf(hidden.clone());
        let kv = tape.leaf(prim.tokens.clone());
        let (a, maps) = attention(&mut tape, &params, &idx, self.config.heads, h, kv);
        let out = tape.add(h, a);
        Ok((tape.value(out).clone(), maps.iter().map(|m| tape.value(*m).clone()).collect()))
    }
}

fn time_features(sigma: f64) -> Array2<f64> {
    let pi = std::f64::consts::PI;
    let mut f = vec![sigma, sigma * sigma];
    for k in 1..=3 {
        let a = k as f64 * pi * sigma;
        f.push(a.sin());
        f.push(a.cos());
    }
    Array2::from_shape_vec((1, TIME_FEATURES), f).expect("fixed width")
}

/// Multi-head scaled dot-product attention; returns the projected output and
/// the per-head attention maps.
fn attention(tape: &mut Tape, params: &[Var], idx: &AttnIdx, heads: usize, q_src: Var, kv_src: Var) -> (Var, Vec<Var>) {
    let d = tape.value(q_src).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(q_src, params[idx.q]);
    let k = tape.matmul(kv_src, params[idx.k]);
    let v = tape.matmul(kv_src, params[idx.v]);
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        let qh = tape.slice_cols(q, cols.clone());
        let kh = tape.slice_cols(k, cols.clone());
        let vh = tape.slice_cols(v, cols);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores);
        outs.push(tape.matmul(a, vh));
        maps.push(a);
    }
    let cat = tape.concat_cols(&outs);
    (tape.matmul(cat, params[idx.o]), maps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSampling {
    /// Distinct timesteps drawn uniformly from `1..timestep_range`.
    #[default]
    Random,
    /// `sigma_u = (S - u) / (S + 1)`.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub steps: usize,
    pub sampling: SigmaSampling,
    pub timestep_range: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { steps: 40, sampling: SigmaSampling::Random, timestep_range: 1000 }
    }
}

/// Strictly decreasing noise levels in `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn uniform_grid(steps: usize) -> Self {
        let n = steps as f64 + 1.0;
        Self { sigmas: (0..steps).map(|u| (steps - u) as f64 / n).collect() }
    }

    /// `steps` distinct timesteps sampled uniformly from the open range
    /// `(0, timestep_range)`, sorted from noisiest to cleanest.
    pub fn random_uniform(steps: usize, timestep_range: usize, seeds: &SeedTree) -> Result<Self, SimError> {
        if timestep_range < 2 || steps > timestep_range - 1 {
            return Err(SimError::Config(format!("cannot draw {steps} distinct timesteps below {timestep_range}")));
        }
        let mut rng = seeds.rng();
        let mut ts: Vec<usize> = sample(&mut rng, timestep_range - 1, steps).into_iter().map(|i| i + 1).collect();
        ts.sort_unstable_by(|a, b| b.cmp(a));
        Ok(Self { sigmas: ts.into_iter().map(|t| t as f64 / timestep_range as f64).collect() })
    }

    pub fn from_config(cfg: &NoiseConfig, seeds: &SeedTree) -> Result<Self, SimError> {
        match cfg.sampling {
            SigmaSampling::Grid => Ok(Self::uniform_grid(cfg.steps)),
            SigmaSampling::Random => Self::random_uniform(cfg.steps, cfg.timestep_range, seeds),
        }
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_valid(&self) -> bool {
        !self.sigmas.is_empty()
            && self.sigmas[0] < 1.0
            && self.sigmas.last().is_some_and(|s| *s > 0.0)
            && self.sigmas.windows(2).all(|w| w[0] > w[1])
    }

    /// Noise level after step `u`; zero after the final step.
    pub fn next_sigma(&self, u: usize) -> f64 {
        self.sigmas.get(u + 1).copied().unwrap_or(0.0)
    }
}

pub fn snr_of_sigma(sigma: f64) -> f64 {
    let r = (1.0 - sigma) / sigma;
    r * r
}

pub fn snr_of_step(u: usize, sched: &NoiseSchedule) -> f64 {
    snr_of_sigma(sched.sigmas[u])
}

/// Primitive token sequences, one per kind; `None` when the caption has no
/// sentence of that kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrimitiveGroups {
    pub obj: Option<TokenSequence>,
    pub rel: Option<TokenSequence>,
    pub attr: Option<TokenSequence>,
}

impl PrimitiveGroups {
    pub fn from_split(split: &SplitTextCaption, bank: &EncoderBank) -> Result<Self, SimError> {
        let enc = |kind| -> Result<Option<TokenSequence>, SimError> {
            let group: Vec<_> = split.of_kind(kind).into_iter().cloned().collect();
            if group.is_empty() {
                return Ok(None);
            }
            Ok(Some(encode_primitive_group(&group, bank)?))
        };
        Ok(Self { obj: enc(PrimitiveKind::Object)?, rel: enc(PrimitiveKind::Relation)?, attr: enc(PrimitiveKind::Attribute)? })
    }

    pub fn get(&self, kind: PrimitiveKind) -> Option<&TokenSequence> {
        match kind {
            PrimitiveKind::Object => self.obj.as_ref(),
            PrimitiveKind::Relation => self.rel.as_ref(),
            PrimitiveKind::Attribute => self.attr.as_ref(),
        }
    }

    pub fn check_width(&self, d: usize) -> Result<(), SimError> {
        for kind in PrimitiveKind::ALL {
            if let Some(t) = self.get(kind) {
                if t.dim() != d {
                    return Err(SimError::Dims(format!("{kind} group width {} vs D={d}", t.dim())));
                }
            }
        }
        Ok(())
    }
}

/// Injection order of the three primitive kinds, such as `ORA`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InjectionOrder(pub [PrimitiveKind; 3]);

impl InjectionOrder {
    pub const DEFAULT: Self = Self([PrimitiveKind::Object, PrimitiveKind::Relation, PrimitiveKind::Attribute]);

    pub fn all() -> Vec<Self> {
        use PrimitiveKind::*;
        [
            [Object, Relation, Attribute],
            [Object, Attribute, Relation],
            [Relation, Object, Attribute],
            [Relation, Attribute, Object],
            [Attribute, Object, Relation],
            [Attribute, Relation, Object],
        ]
        .into_iter()
        .map(Self)
        .collect()
    }
}

impl fmt::Display for InjectionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|k| write!(f, "{}", k.letter()))
    }
}

impl FromStr for InjectionOrder {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let kinds: Vec<PrimitiveKind> = s
            .chars()
            .map(|c| PrimitiveKind::from_letter(c.to_ascii_uppercase()))
            .collect::<Option<_>>()
            .ok_or_else(|| SimError::BadOrder(s.to_string()))?;
        match kinds.as_slice() {
            [a, b, c] if a != b && b != c && a != c => Ok(Self([*a, *b, *c])),
            _ => Err(SimError::BadOrder(s.to_string())),
        }
    }
}

/// Step at which each primitive kind joins the injected sequence. Kinds are
/// concatenated in activation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionPlan {
    pub starts: Vec<(PrimitiveKind, usize)>,
    pub label: String,
}

impl InjectionPlan {
    /// The schedule's three steps handed out to kinds in `order`.
    pub fn from_schedule(schedule: &InjectionSchedule, order: InjectionOrder) -> Self {
        let steps = [schedule.s_obj, schedule.s_rel, schedule.s_attr];
        Self { starts: order.0.iter().copied().zip(steps).collect(), label: order.to_string() }
    }

    /// No injection at all.
    pub fn disabled() -> Self {
        Self { starts: Vec::new(), label: "off".into() }
    }

    /// Every kind from the first step; used to record calibration traces.
    pub fn all_at_start() -> Self {
        Self { starts: PrimitiveKind::ALL.iter().map(|k| (*k, 0)).collect(), label: "all".into() }
    }

    pub fn is_active(&self, kind: PrimitiveKind, u: usize) -> bool {
        self.starts.iter().any(|(k, s)| *k == kind && *s <= u)
    }

    pub fn start_of(&self, kind: PrimitiveKind) -> Option<usize> {
        self.starts.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s)
    }

    /// Kinds active at step `u`, in activation order.
    pub fn active_kinds(&self, u: usize) -> Vec<PrimitiveKind> {
        let mut v: Vec<(usize, usize, PrimitiveKind)> =
            self.starts.iter().enumerate().filter(|(_, (_, s))| *s <= u).map(|(i, (k, s))| (*s, i, *k)).collect();
        v.sort();
        v.into_iter().map(|(_, _, k)| k).collect()
    }
}

/// Length-wise concatenation of every group active at step `u`, or `None`
/// when nothing is active yet.
pub fn active_primitives(plan: &InjectionPlan, u: usize, groups: &PrimitiveGroups) -> Option<TokenSequence> {
    let parts: Vec<(PrimitiveKind, &TokenSequence)> =
        plan.active_kinds(u).into_iter().filter_map(|k| groups.get(k).map(|t| (k, t))).collect();
    if parts.is_empty() {
        return None;
    }
    let views: Vec<_> = parts.iter().map(|(_, t)| t.tokens.view()).collect();
    let tokens = concatenate(Axis(0), &views).expect("group widths agree");
    let provenance = parts.iter().map(|(k, _)| k.letter()).collect();
    Some(TokenSequence { tokens, provenance })
}

/// Simulator settings as they appear in a run config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub model: ToyModelConfig,
    pub noise: NoiseConfig,
    pub schedule: Option<PlannedSchedule>,
    pub seed: u64,
}

/// Explicit injection steps, bypassing trace calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedSchedule {
    pub s_rel: usize,
    pub s_attr: usize,
    #[serde(default = "default_order")]
    pub order: String,
}

fn default_order() -> String {
    InjectionOrder::DEFAULT.to_string()
}

/// Integrates the probability-flow ODE from `sigmas[0]` to zero with explicit
/// Euler steps, recording injection attention at every step.
pub fn denoise_run(
    model: &ToyModel,
    cond: &TokenSequence,
    groups: &PrimitiveGroups,
    plan: &InjectionPlan,
    noise: &NoiseSchedule,
    seeds: &SeedTree,
    sample_id: &str,
) -> Result<(Array2<f64>, DenoiseTrace), SimError> {
    let cfg = &model.config;
    if !noise.is_valid() {
        return Err(SimError::Config("noise schedule must be strictly decreasing inside (0, 1)".into()));
    }
    if cond.dim() != cfg.dim {
        return Err(SimError::Dims(format!("conditioning width {} vs D={}", cond.dim(), cfg.dim)));
    }
    groups.check_width(cfg.dim)?;
    let mut rng = seeds.child("latent").rng();
    let mut x = Array2::from_shape_simple_fn((cfg.latent_tokens, cfg.dim), || StandardNormal.sample(&mut rng));
    let inject_layers = cfg.injection_layers();
    let mut steps = Vec::with_capacity(noise.steps());
    for (u, &sigma) in noise.sigmas.iter().enumerate() {
        let prim = active_primitives(plan, u, groups);
        let mut tape = Tape::new();
        let params = model.leaves(&mut tape);
        let xv = tape.leaf(x.clone());
        let cv = tape.leaf(cond.tokens.clone());
        let pv = prim.as_ref().map(|p| tape.leaf(p.tokens.clone()));
        let out = model.forward(&mut tape, &params, xv, sigma, cv, pv)?;
        let attn = match &out.inject_maps {
            Some(maps) => maps.iter().map(|hs| hs.iter().map(|m| tape.value(*m).clone()).collect()).collect(),
            None => vec![vec![Array2::zeros((cfg.latent_tokens, 0)); cfg.heads]; inject_layers],
        };
        let dt = noise.next_sigma(u) - sigma;
        x.scaled_add(dt, tape.value(out.velocity));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteLatent { step: u });
        }
        steps.push(StepRecord { step: u, sigma, snr: snr_of_sigma(sigma), attn });
    }
    Ok((x, DenoiseTrace { sample_id: sample_id.to_string(), steps }))
}

/// Attention mass each primitive kind receives per step, averaged over
/// layers, heads and query rows. Keyed by kind letter.
pub fn attention_mass_by_kind(
    trace: &DenoiseTrace,
    plan: &InjectionPlan,
    groups: &PrimitiveGroups,
) -> BTreeMap<char, Vec<f64>> {
    let mut out: BTreeMap<char, Vec<f64>> = BTreeMap::new();
    for kind in PrimitiveKind::ALL {
        out.insert(kind.letter(), Vec::with_capacity(trace.steps.len()));
    }
    for rec in &trace.steps {
        let mut spans = Vec::new();
        let mut start = 0;
        for k in plan.active_kinds(rec.step) {
            if let Some(t) = groups.get(k) {
                spans.push((k, start..start + t.len()));
                start += t.len();
            }
        }
        let maps: Vec<&Array2<f64>> = rec.attn.iter().flatten().collect();
        for kind in PrimitiveKind::ALL {
            let span = spans.iter().find(|(k, _)| *k == kind).map(|(_, r)| r.clone());
            let mass = match span {
                Some(r) if !maps.is_empty() => {
                    maps.iter()
                        .map(|m| m.slice(ndarray::s![.., r.clone()]).sum() / m.nrows().max(1) as f64)
                        .sum::<f64>()
                        / maps.len() as f64
                }
                _ => 0.0,
            };
            out.get_mut(&kind.letter()).expect("inserted").push(mass);
        }
    }
    out
}
