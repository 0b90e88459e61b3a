//! Composite training objective and a toy training loop.
//!
//! ```text
//! L = L_cfm + lambda * L_attn
//! ```
//!
//! `L_cfm` is the rectified-flow matching loss. `L_attn` pulls every
//! conditioning attention row toward the uniform distribution over the
//! split-text tokens of the primitive kinds active at that noise level.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::caption_graph::assemble_graph;
use crate::caption_parser::parse_rule_based;
use crate::caption_parser::synth::random_caption;
use crate::injection_schedule::{InjectionSchedule, ScheduleConfig};
use crate::rng::SeedTree;
use crate::split_text::{split_caption, PrimitiveKind, SplitTextCaption};
use crate::token_encoding::{build_input_sequence, kind_token_positions, EncoderBank, EncoderDims, TokenSequence};
use crate::toy_denoiser::{
    active_primitives, InjectionOrder, InjectionPlan, NoiseConfig, NoiseSchedule, PlannedSchedule, PrimitiveGroups,
    SimError, ToyModel, ToyModelConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { step: Option<usize> },
    #[error("alignment target span is empty")]
    EmptySpan,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnTarget {
    /// Smoothed cross-entropy to a uniform distribution over the span.
    #[default]
    UniformSpan,
    /// `-ln(mass on span + eps)`.
    SpanMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub attn_target: AttnTarget,
    pub eps: f64,
    pub ceiling: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1, attn_target: AttnTarget::UniformSpan, eps: 1e-6, ceiling: 1e3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(TrainError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.eps > 0.0 && self.ceiling > 0.0) {
            return Err(TrainError::Config("eps and ceiling must be positive".into()));
        }
        Ok(())
    }
}

/// One captioned example with everything the loss needs.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub caption: String,
    pub split: SplitTextCaption,
    pub x0: Array2<f64>,
    pub cond: TokenSequence,
    pub groups: PrimitiveGroups,
    /// Rows in the first half of `cond`; split-text tokens start here.
    pub half_len: usize,
    pub max_len: usize,
}

impl TrainItem {
    /// Absolute positions in `cond` of the split-text tokens of `kinds`.
    pub fn target_positions(&self, kinds: &[PrimitiveKind]) -> Vec<usize> {
        kind_token_positions(&self.split, kinds, self.max_len)
            .into_iter()
            .map(|p| p + self.half_len)
            .filter(|p| *p < self.cond.len())
            .collect()
    }
}

/// Items plus the noise draws that make the loss a deterministic function of
/// the parameters.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
    pub sigmas: Vec<f64>,
    pub noises: Vec<Array2<f64>>,
    pub seed: u64,
}

impl TrainBatch {
    pub fn draw(items: Vec<TrainItem>, seeds: &SeedTree) -> Self {
        let mut rng = seeds.child("sigma").rng();
        let sigmas = items.iter().map(|_| rng.random_range(1e-3..1.0 - 1e-3)).collect();
        let noises = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let mut r = seeds.child("eps").index(i as u64).rng();
                Array2::from_shape_simple_fn(it.x0.dim(), || StandardNormal.sample(&mut r))
            })
            .collect();
        Self { items, sigmas, noises, seed: seeds.as_u64() }
    }

    fn x_sigma(&self, i: usize) -> Array2<f64> {
        let s = self.sigmas[i];
        &self.items[i].x0 * (1.0 - s) + &self.noises[i] * s
    }

    fn velocity_target(&self, i: usize) -> Array2<f64> {
        &self.noises[i] - &self.items[i].x0
    }
}

/// Which primitive kinds are injected at a given noise level during training.
/// A kind scheduled at step `s > 0` is active once `sigma <= sigmas[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub plan: InjectionPlan,
    pub noise: NoiseSchedule,
}

impl Activation {
    pub fn active_kinds(&self, sigma: f64) -> Vec<PrimitiveKind> {
        let mut v: Vec<(usize, PrimitiveKind)> = self
            .plan
            .starts
            .iter()
            .filter(|(_, s)| *s == 0 || self.noise.sigmas.get(*s).is_some_and(|t| sigma <= *t))
            .map(|(k, s)| (*s, *k))
            .collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }

    /// Step index whose noise level is nearest to `sigma`.
    fn step_of(&self, sigma: f64) -> usize {
        let kinds = self.active_kinds(sigma);
        (0..self.noise.steps())
            .find(|&u| self.plan.active_kinds(u) == kinds)
            .unwrap_or(0)
    }
}

/// Mean squared error between velocities returned by `velocity` and the
/// flow-matching target `eps - x0`.
pub fn cfm_loss_with<F>(batch: &TrainBatch, mut velocity: F) -> Result<f64, TrainError>
where
    F: FnMut(usize, &Array2<f64>, f64) -> Result<Array2<f64>, TrainError>,
{
    let mut total = 0.0;
    for i in 0..batch.items.len() {
        let v = velocity(i, &batch.x_sigma(i), batch.sigmas[i])?;
        let diff = v - batch.velocity_target(i);
        total += diff.iter().map(|d| d * d).sum::<f64>() / diff.len().max(1) as f64;
    }
    let loss = total / batch.items.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: None });
    }
    Ok(loss)
}

pub fn cfm_loss(model: &ToyModel, batch: &TrainBatch, act: &Activation) -> Result<f64, TrainError> {
    Ok(total_loss(model, batch, act, &LossConfig { lambda: 0.0, ..Default::default() })?.cfm)
}

fn uniform_target(rows: usize, cols: usize, positions: &[usize]) -> Result<Array2<f64>, TrainError> {
    if positions.is_empty() {
        return Err(TrainError::EmptySpan);
    }
    let mut t = Array2::zeros((rows, cols));
    let w = 1.0 / positions.len() as f64;
    for &p in positions {
        if p >= cols {
            return Err(TrainError::Config(format!("target position {p} outside {cols} keys")));
        }
        t.column_mut(p).fill(w);
    }
    Ok(t)
}

/// Mean over maps and rows of the smoothed cross-entropy
/// `min(sum_k t_k ln((t_k + eps) / (a_k + eps)), ceiling)` with `t` uniform
/// over `positions`.
pub fn attn_alignment_loss(maps: &[Array2<f64>], positions: &[usize], cfg: &LossConfig) -> Result<f64, TrainError> {
    if maps.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let mut acc = 0.0;
    for m in maps {
        let target = uniform_target(m.nrows(), m.ncols(), positions)?;
        let a = tape.leaf(m.clone());
        let l = align_var(&mut tape, a, target, cfg);
        acc += tape.scalar(l);
    }
    Ok(acc / maps.len() as f64)
}

fn align_var(tape: &mut Tape, attn: Var, target: Array2<f64>, cfg: &LossConfig) -> Var {
    match cfg.attn_target {
        AttnTarget::UniformSpan => tape.align_loss(attn, target, cfg.eps, cfg.ceiling),
        AttnTarget::SpanMass => {
            // Two-way split of each row: mass on the span versus the rest.
            let rows = target.nrows();
            let mask = Array2::from_shape_fn((target.ncols(), 1), |(k, _)| if target[[0, k]] > 0.0 { 1.0 } else { 0.0 });
            let m = tape.leaf(mask);
            let mass = tape.matmul(attn, m);
            let neg = tape.scale(mass, -1.0);
            let one = tape.leaf(Array2::ones((rows, 1)));
            let rest = tape.add(neg, one);
            let two = tape.concat_cols(&[mass, rest]);
            let mut t = Array2::zeros((rows, 2));
            t.column_mut(0).fill(1.0);
            tape.align_loss(two, t, cfg.eps, cfg.ceiling)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub cfm: f64,
    pub attn: f64,
    pub total: f64,
}

struct TapeLoss {
    total: Var,
    cfm: f64,
    attn: f64,
}

fn loss_on_tape(
    model: &ToyModel,
    tape: &mut Tape,
    params: &[Var],
    batch: &TrainBatch,
    act: &Activation,
    cfg: &LossConfig,
) -> Result<TapeLoss, TrainError> {
    let n = batch.items.len();
    if n == 0 {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut cfm_terms = Vec::with_capacity(n);
    let mut attn_terms = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        let sigma = batch.sigmas[i];
        let prim = active_primitives(&act.plan, act.step_of(sigma), &item.groups);
        let x = tape.leaf(batch.x_sigma(i));
        let c = tape.leaf(item.cond.tokens.clone());
        let p = prim.map(|p| tape.leaf(p.tokens));
        let out = model.forward(tape, params, x, sigma, c, p)?;
        let target = tape.leaf(batch.velocity_target(i));
        let diff = tape.sub(out.velocity, target);
        cfm_terms.push(tape.mean_square(diff));

        let kinds = act.active_kinds(sigma);
        if kinds.is_empty() {
            continue;
        }
        let positions = item.target_positions(&kinds);
        if positions.is_empty() {
            // The caption has no sentences of the active kinds.
            continue;
        }
        let maps: Vec<Var> = out.cond_maps.iter().flatten().copied().collect();
        let mut per_map = Vec::with_capacity(maps.len());
        for m in maps {
            let (r, c) = tape.value(m).dim();
            per_map.push(align_var(tape, m, uniform_target(r, c, &positions)?, cfg));
        }
        attn_terms.push(mean_of(tape, &per_map));
    }
    let cfm = mean_of(tape, &cfm_terms);
    let cfm_v = tape.scalar(cfm);
    let (total, attn_v) = if attn_terms.is_empty() {
        (cfm, 0.0)
    } else {
        // Averaged over the whole batch so items without active kinds count as zero.
        let sum = sum_of(tape, &attn_terms);
        let attn = tape.scale(sum, 1.0 / n as f64);
        let weighted = tape.scale(attn, cfg.lambda);
        (tape.add(cfm, weighted), tape.scalar(attn))
    };
    if !tape.scalar(total).is_finite() {
        return Err(TrainError::NonFiniteLoss { step: None });
    }
    Ok(TapeLoss { total, cfm: cfm_v, attn: attn_v })
}

fn sum_of(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v);
    }
    acc
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Var {
    let s = sum_of(tape, vars);
    tape.scale(s, 1.0 / vars.len() as f64)
}

/// `L_cfm + lambda * L_attn` together with both components.
pub fn total_loss(model: &ToyModel, batch: &TrainBatch, act: &Activation, cfg: &LossConfig) -> Result<LossParts, TrainError> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let params = model.leaves(&mut tape);
    let l = loss_on_tape(model, &mut tape, &params, batch, act, cfg)?;
    Ok(LossParts { cfm: l.cfm, attn: l.attn, total: tape.scalar(l.total) })
}

/// Loss value and gradient for every parameter tensor.
pub fn loss_and_grad(
    model: &ToyModel,
    batch: &TrainBatch,
    act: &Activation,
    cfg: &LossConfig,
) -> Result<(LossParts, Vec<Array2<f64>>), TrainError> {
    let mut tape = Tape::new();
    let params = model.leaves(&mut tape);
    let l = loss_on_tape(model, &mut tape, &params, batch, act, cfg)?;
    let grads = tape.backward(l.total);
    let g = params.iter().zip(&model.params).map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(p.dim()))).collect();
    Ok((LossParts { cfm: l.cfm, attn: l.attn, total: tape.scalar(l.total) }, g))
}

/// Worst relative error between analytic and central-difference gradients
/// over up to `coords` randomly chosen scalar parameters of `params`.
/// `f` must build a scalar loss from the parameter leaves.
pub fn grad_check_fn<F>(params: &[Array2<f64>], f: F, eps: f64, coords: usize, seeds: &SeedTree) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let eval = |ps: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root);

    let mut rng = seeds.rng();
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for flat in sample(&mut rng, total, coords.min(total)) {
        let (pi, off) = locate(params, flat);
        let cols = params[pi].ncols();
        let (r, c) = (off / cols, off % cols);
        let analytic = grads.get(vars[pi]).map_or(0.0, |g| g[[r, c]]);
        let orig = work[pi][[r, c]];
        work[pi][[r, c]] = orig + eps;
        let up = eval(&work);
        work[pi][[r, c]] = orig - eps;
        let down = eval(&work);
        work[pi][[r, c]] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

fn locate(params: &[Array2<f64>], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    unreachable!("index within total parameter count")
}

/// [`grad_check_fn`] applied to the composite loss of `model` on `batch`.
pub fn grad_check(
    model: &ToyModel,
    batch: &TrainBatch,
    act: &Activation,
    cfg: &LossConfig,
    eps: f64,
    coords: usize,
    seeds: &SeedTree,
) -> Result<f64, TrainError> {
    // Surface errors once up front; the closure below cannot return them.
    total_loss(model, batch, act, cfg)?;
    Ok(grad_check_fn(
        &model.params,
        |tape, vars| loss_on_tape(model, tape, vars, batch, act, cfg).expect("checked above").total,
        eps,
        coords,
        seeds,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    /// Items in the fixed batch the loss curve is measured on.
    pub eval_size: usize,
    /// Trailing window for the smoothed loss.
    pub smoothing: usize,
    /// Scale of the per-item noise added to the primitive-built latents.
    pub data_noise: f64,
    pub loss: LossConfig,
    pub model: ToyModelConfig,
    pub encoder: EncoderDims,
    pub noise: NoiseConfig,
    pub schedule: PlannedSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: DEFAULT_LR,
            batch_size: 4,
            dataset_size: 64,
            eval_size: 8,
            smoothing: 20,
            data_noise: 0.1,
            loss: LossConfig::default(),
            model: ToyModelConfig::default(),
            encoder: EncoderDims::default(),
            noise: NoiseConfig::default(),
            schedule: PlannedSchedule { s_rel: 8, s_attr: 30, order: InjectionOrder::DEFAULT.to_string() },
            seed: 0,
        }
    }
}

pub const DEFAULT_LR: f64 = 2e-2;

impl TrainConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn activation(&self, seeds: &SeedTree) -> Result<Activation, TrainError> {
        let noise = NoiseSchedule::from_config(&self.noise, &seeds.child("noise"))?;
        let sched = InjectionSchedule::new(self.schedule.s_rel, self.schedule.s_attr, noise.steps(), &ScheduleConfig::default())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let order = self.schedule.order.parse::<InjectionOrder>()?;
        Ok(Activation { plan: InjectionPlan::from_schedule(&sched, order), noise })
    }
}

/// Deterministic latent for a caption: each simplified sentence contributes a
/// rank-one pattern keyed by its text, plus a little per-item noise.
pub fn caption_latent(split: &SplitTextCaption, tokens: usize, dim: usize, noise: f64, seeds: &SeedTree) -> Array2<f64> {
    let mut x = Array2::zeros((tokens, dim));
    let n = split.sentences.len().max(1) as f64;
    for sent in &split.sentences {
        let mut h = Sha256::new();
        h.update(b"latent");
        h.update(sent.text.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(key);
        let rows: Vec<f64> = (0..tokens).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cols: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (r, a) in rows.iter().enumerate() {
            for (c, b) in cols.iter().enumerate() {
                x[[r, c]] += a * b / n.sqrt();
            }
        }
    }
    let mut rng = seeds.rng();
    x.mapv_inplace(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + noise * z
    });
    x
}

pub fn make_item(
    caption: &str,
    bank: &EncoderBank,
    model: &ToyModelConfig,
    data_noise: f64,
    seeds: &SeedTree,
) -> Result<TrainItem, TrainError> {
    let prims = parse_rule_based(caption).map_err(|e| TrainError::Config(e.to_string()))?;
    let graph = assemble_graph(caption, &prims).map_err(|e| TrainError::Config(e.to_string()))?;
    item_from_split(caption, split_caption(&graph), bank, model, data_noise, seeds)
}

pub fn item_from_split(
    caption: &str,
    split: SplitTextCaption,
    bank: &EncoderBank,
    model: &ToyModelConfig,
    data_noise: f64,
    seeds: &SeedTree,
) -> Result<TrainItem, TrainError> {
    let cond = build_input_sequence(&split, caption, bank).map_err(SimError::from)?;
    let groups = PrimitiveGroups::from_split(&split, bank)?;
    let x0 = caption_latent(&split, model.latent_tokens, model.dim, data_noise, seeds);
    Ok(TrainItem { caption: caption.to_string(), half_len: cond.len() / 2, max_len: bank.max_len(), split, x0, cond, groups })
}

/// Synthetic dataset of random mini-grammar captions. Items are built in
/// parallel; each draws from its own seed so the result does not depend on
/// the thread count.
pub fn synth_dataset(cfg: &TrainConfig, bank: &EncoderBank, seeds: &SeedTree) -> Result<Vec<TrainItem>, TrainError> {
    (0..cfg.dataset_size)
        .into_par_iter()
        .map(|i| {
            let s = seeds.index(i as u64);
            let caption = random_caption(&mut s.child("caption").rng());
            make_item(&caption, bank, &cfg.model, cfg.data_noise, &s.child("latent"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Total loss on the fixed evaluation batch at each step, before the update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        smooth(&self.losses, window)
    }

    /// Final over initial value of the smoothed curve.
    pub fn improvement_ratio(&self, window: usize) -> f64 {
        let s = self.smoothed(window);
        match (s.first(), s.last()) {
            (Some(a), Some(b)) if *a != 0.0 => b / a,
            _ => 1.0,
        }
    }
}

/// Trailing mean over up to `window` values.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Plain gradient descent on the composite loss over random minibatches of
/// a freshly synthesised dataset.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let root = SeedTree::new(cfg.seed);
    let bank = EncoderBank::new(&cfg.encoder, &root.child("encoders")).map_err(SimError::from)?;
    if bank.model_dim() != cfg.model.dim {
        return Err(TrainError::Config(format!("encoder width {} vs model width {}", bank.model_dim(), cfg.model.dim)));
    }
    let data = synth_dataset(cfg, &bank, &root.child("data"))?;
    let act = cfg.activation(&root)?;
    let model = ToyModel::new(cfg.model.clone(), &root.child("model"))?;
    train_model(cfg, model, &act, &data, &root)
}

/// The optimisation loop behind [`train_toy`], starting from `model`.
pub fn train_model(
    cfg: &TrainConfig,
    mut model: ToyModel,
    act: &Activation,
    data: &[TrainItem],
    root: &SeedTree,
) -> Result<TrainOutcome, TrainError> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 || data.is_empty() {
        return Err(TrainError::Config("batch_size and dataset must be non-empty".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(TrainError::Config(format!("lr must be finite and >= 0, got {}", cfg.lr)));
    }
    let eval_items = data.iter().take(cfg.eval_size.max(1)).cloned().collect();
    let eval = TrainBatch::draw(eval_items, &root.child("eval"));
    let with_step = |step: usize| {
        move |e: TrainError| match e {
            TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { step: Some(step) },
            other => other,
        }
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        losses.push(total_loss(&model, &eval, act, &cfg.loss).map_err(with_step(step))?.total);
        let bs = root.child("batch").index(step as u64);
        let mut rng = bs.child("pick").rng();
        let items = (0..cfg.batch_size).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        let batch = TrainBatch::draw(items, &bs);
        let (parts, grads) = loss_and_grad(&model, &batch, act, &cfg.loss).map_err(with_step(step))?;
        for (p, g) in model.params.iter_mut().zip(&grads) {
            p.scaled_add(-cfg.lr, g);
        }
        if !model.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: Some(step) });
        }
        log::debug!("step {step}: loss {:.6} (cfm {:.6}, attn {:.6})", parts.total, parts.cfm, parts.attn);
    }
    Ok(TrainOutcome { model, losses })
}

pub fn write_loss_curve<W: Write>(mut w: W, losses: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ToyModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

/// JSON header line, then every tensor as little-endian `f32`, in header order.
pub fn checkpoint_bytes(model: &ToyModel, config_hash: &str) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        config_hash: config_hash.to_string(),
        tensors: model.names.iter().zip(&model.params).map(|(n, p)| TensorEntry { name: n.clone(), shape: [p.nrows(), p.ncols()] }).collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for p in &model.params {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, model: &ToyModel, config_hash: &str) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_bytes(model, config_hash))?;
    Ok(())
}

/// Loads a checkpoint; returns the model and the stored config hash.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ToyModel, String), TrainError> {
    let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| TrainError::Checkpoint("missing header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut model = ToyModel::zeroed(header.config)?;
    if header.tensors.len() != model.params.len() {
        return Err(TrainError::Checkpoint(format!("{} tensors, model has {}", header.tensors.len(), model.params.len())));
    }
    let mut payload = bytes[nl + 1..].chunks_exact(4);
    for (entry, (name, p)) in header.tensors.iter().zip(model.names.iter().zip(model.params.iter_mut())) {
        if entry.name != *name || entry.shape != [p.nrows(), p.ncols()] {
            return Err(TrainError::Checkpoint(format!("tensor {} {:?} does not match model layout", entry.name, entry.shape)));
        }
        for v in p.iter_mut() {
            let c = payload.next().ok_or_else(|| TrainError::Checkpoint("payload too short".into()))?;
            *v = f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64;
        }
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(TrainError::Checkpoint("trailing payload bytes".into()));
    }
    Ok((model, header.config_hash))
}

/// Conditioning-attention rows restricted to the split-text half, averaged
/// over maps; a quick view for diagnostics.
pub fn split_half_mass(maps: &[Array2<f64>], half_len: usize) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    maps.iter().map(|m| m.slice(s![.., half_len..]).sum() / m.nrows().max(1) as f64).sum::<f64>() / maps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize, seed: u64) -> (ToyModel, TrainBatch, Activation) {
        let cfg = TrainConfig { dataset_size: n, seed, ..Default::default() };
        let root = SeedTree::new(seed);
        let bank = EncoderBank::new(&cfg.encoder, &root.child("encoders")).unwrap();
        let data = synth_dataset(&cfg, &bank, &root.child("data")).unwrap();
        let act = cfg.activation(&root).unwrap();
        let model = ToyModel::new(cfg.model.clone(), &root.child("model")).unwrap();
        (model, TrainBatch::draw(data, &root.child("batch")), act)
    }

    #[test]
    fn cfm_oracle_and_zero_outputs() {
        let (_, batch, _) = setup(3, 1);
        let oracle = cfm_loss_with(&batch, |i, _, _| Ok(&batch.noises[i] - &batch.items[i].x0)).unwrap();
        assert_eq!(oracle, 0.0);
        let zero = cfm_loss_with(&batch, |i, _, _| Ok(Array2::zeros(batch.items[i].x0.dim()))).unwrap();
        let expect = (0..3)
            .map(|i| {
                let d = &batch.noises[i] - &batch.items[i].x0;
                d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
            })
            .sum::<f64>()
            / 3.0;
        assert!((zero - expect).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_zero_when_uniform_and_clipped_when_off_span() {
        let cfg = LossConfig::default();
        let mut a = Array2::zeros((3, 5));
        a.column_mut(1).fill(0.5);
        a.column_mut(3).fill(0.5);
        assert!(attn_alignment_loss(&[a], &[1, 3], &cfg).unwrap().abs() < 1e-12);
        let mut off = Array2::zeros((2, 4));
        off.column_mut(0).fill(1.0);
        let tight = LossConfig { eps: 1e-300, ceiling: 5.0, ..cfg.clone() };
        assert_eq!(attn_alignment_loss(&[off], &[2], &tight).unwrap(), 5.0);
        assert!(matches!(attn_alignment_loss(&[Array2::zeros((1, 2))], &[], &cfg), Err(TrainError::EmptySpan)));
    }

    #[test]
    fn total_is_affine_in_lambda() {
        let (model, batch, act) = setup(2, 2);
        let at = |l: f64| total_loss(&model, &batch, &act, &LossConfig { lambda: l, ..Default::default() }).unwrap();
        let (a, b, c) = (at(0.0), at(1.0), at(2.0));
        assert_eq!(a.total, a.cfm);
        assert!(b.attn > 0.0);
        assert!(((c.total - b.total) - b.attn).abs() < 1e-12);
        assert!(((b.total - a.total) - b.attn).abs() < 1e-12);
        assert_eq!(cfm_loss(&model, &batch, &act).unwrap(), a.cfm);
    }

    #[test]
    fn gradient_check_full_model() {
        let (model, batch, act) = setup(2, 3);
        let err = grad_check(&model, &batch, &act, &LossConfig::default(), 1e-5, 100, &SeedTree::new(9)).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
        let mass = LossConfig { attn_target: AttnTarget::SpanMass, lambda: 1.0, ..Default::default() };
        let err = grad_check(&model, &batch, &act, &mass, 1e-5, 100, &SeedTree::new(9)).unwrap();
        assert!(err < 1e-4, "span-mass relative error {err}");
    }

    #[test]
    fn gradient_check_linear_and_empty() {
        let mut rng = SeedTree::new(4).rng();
        let w = Array2::from_shape_simple_fn((6, 20), || StandardNormal.sample(&mut rng));
        let x = Array2::from_shape_simple_fn((3, 6), || StandardNormal.sample(&mut rng));
        let err = grad_check_fn(
            &[w],
            |t, v| {
                let xv = t.leaf(x.clone());
                let y = t.matmul(xv, v[0]);
                let ones = t.leaf(Array2::ones((20, 1)));
                let s = t.matmul(y, ones);
                let ones = t.leaf(Array2::ones((1, 3)));
                t.matmul(ones, s)
            },
            1e-5,
            120,
            &SeedTree::new(5),
        );
        assert!(err < 1e-7, "{err}");
        assert_eq!(grad_check_fn(&[], |t, _| t.leaf(Array2::zeros((1, 1))), 1e-5, 100, &SeedTree::new(1)), 0.0);
    }

    #[test]
    fn zero_lr_is_flat_and_runs_repeat() {
        let cfg = TrainConfig { steps: 5, lr: 0.0, dataset_size: 1, batch_size: 1, ..Default::default() };
        let a = train_toy(&cfg).unwrap();
        assert_eq!(a.losses.len(), 5);
        assert!(a.losses.iter().all(|l| (l - a.losses[0]).abs() < 1e-12));
        let cfg = TrainConfig { steps: 5, dataset_size: 8, ..Default::default() };
        assert_eq!(train_toy(&cfg).unwrap().losses, train_toy(&cfg).unwrap().losses);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, _, _) = setup(1, 6);
        let bytes = checkpoint_bytes(&model, "abc");
        let (back, hash) = read_checkpoint(&bytes).unwrap();
        assert_eq!(hash, "abc");
        for (a, b) in model.params.iter().zip(&back.params) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn loss_curve_format() {
        let mut buf = Vec::new();
        write_loss_curve(&mut buf, &[1.5, 0.25]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,1.5\n1,0.25\n");
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
