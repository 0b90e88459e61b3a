//! Injection timestep selection from denoising traces.
//!
//! Step index `u = 0` is the noisiest inference step; indices grow toward the
//! clean sample.
//!
//! * `s_attr`: first step at which the moving average (window `w`) of the
//!   batch-mean relative cross-attention change drops below `tau`.
//! * `s_rel`: maximum discrete curvature of the batch-mean SNR curve over the
//!   steps before `s_attr`.
//! * `s_obj`: always 0.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub sigma: f64,
    pub snr: f64,
    /// `attn[m][h]` is a `Q x K` row-stochastic matrix.
    pub attn: Vec<Vec<Array2<f64>>>,
}

impl StepRecord {
    pub fn shape(&self) -> (usize, usize) {
        self.attn.first().and_then(|l| l.first()).map_or((0, 0), |a| a.dim())
    }

    pub fn layers(&self) -> usize {
        self.attn.len()
    }

    pub fn heads(&self) -> usize {
        self.attn.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseTrace {
    pub sample_id: String,
    pub steps: Vec<StepRecord>,
}

impl DenoiseTrace {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("attention shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("inconsistent trace batch: {0}")]
    InconsistentTraces(String),
    #[error("series of length {len} is shorter than the window {w}")]
    SeriesTooShort { len: usize, w: usize },
    #[error("moving-average attention change never fell below tau={tau}")]
    NoConvergence { tau: f64 },
    #[error("curvature needs at least 3 points, got {0}")]
    TooFewSteps(usize),
    #[error("degenerate x axis at interior index {0}")]
    DegenerateAxis(usize),
    #[error("x axis is not strictly monotone at index {0}")]
    NonMonotoneAxis(usize),
    #[error("relation step {s_rel} is not before attribute step {s_attr}")]
    OrderingViolation { s_rel: usize, s_attr: usize },
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error("trace file {path}: {message}")]
    TraceFormat { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMode {
    /// Curvature of mean SNR against the step index.
    IndexAxis,
    /// Curvature of `g(snr)` against `snr`.
    LiteralSnrAxis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveTransform {
    Identity,
    Log,
}

impl CurveTransform {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Log => v.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub w: usize,
    pub theta: f64,
    pub tau: f64,
    /// Half-widths in diffusion-timestep units.
    pub attr_window: f64,
    pub rel_window: f64,
    pub obj_window: f64,
    /// Diffusion-timestep span that the `S` inference steps cover.
    pub timestep_range: f64,
    pub curvature_mode: CurvatureMode,
    pub g: CurveTransform,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            w: 3,
            theta: 1e-8,
            tau: 1e-4,
            attr_window: 10.0,
            rel_window: 40.0,
            obj_window: 0.0,
            timestep_range: 1000.0,
            curvature_mode: CurvatureMode::IndexAxis,
            g: CurveTransform::Log,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.w < 1 {
            return Err(ScheduleError::InvalidConfig("w must be >= 1".into()));
        }
        if self.tau.is_nan() || self.theta.is_nan() || self.tau <= 0.0 || self.theta <= 0.0 {
            return Err(ScheduleError::InvalidConfig("tau and theta must be > 0".into()));
        }
        Ok(())
    }

    /// Converts a timestep half-width into steps for an `S`-step sampler.
    pub fn steps_for(&self, timesteps: f64, total_steps: usize) -> usize {
        (timesteps * total_steps as f64 / self.timestep_range).ceil().max(0.0) as usize
    }
}

/// Inclusive step range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow(pub usize, pub usize);

impl StepWindow {
    fn around(center: usize, half: usize, total_steps: usize) -> Self {
        let last = total_steps.saturating_sub(1);
        Self(center.saturating_sub(half), (center + half).min(last))
    }

    pub fn contains(&self, u: usize) -> bool {
        self.0 <= u && u <= self.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windows {
    pub obj: StepWindow,
    pub rel: StepWindow,
    pub attr: StepWindow,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub s_obj: usize,
    pub s_rel: usize,
    pub s_attr: usize,
    pub total_steps: usize,
    pub windows: Windows,
}

impl InjectionSchedule {
    pub fn new(s_rel: usize, s_attr: usize, total_steps: usize, cfg: &ScheduleConfig) -> Result<Self, ScheduleError> {
        if s_rel >= s_attr || s_attr >= total_steps.max(1) {
            return Err(ScheduleError::OrderingViolation { s_rel, s_attr });
        }
        let half = |t| cfg.steps_for(t, total_steps);
        Ok(Self {
            s_obj: 0,
            s_rel,
            s_attr,
            total_steps,
            windows: Windows {
                obj: StepWindow::around(0, half(cfg.obj_window), total_steps),
                rel: StepWindow::around(s_rel, half(cfg.rel_window), total_steps),
                attr: StepWindow::around(s_attr, half(cfg.attr_window), total_steps),
            },
        })
    }

    pub fn is_ordered(&self) -> bool {
        self.s_obj == 0 && self.s_obj <= self.s_rel && self.s_rel < self.s_attr && self.s_attr < self.total_steps
    }
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||curr - prev||_F / (||prev||_F + theta)`.
pub fn attention_step_diff(curr: &Array2<f64>, prev: &Array2<f64>, theta: f64) -> Result<f64, ScheduleError> {
    if curr.dim() != prev.dim() {
        return Err(ScheduleError::ShapeMismatch(curr.dim(), prev.dim()));
    }
    let diff = curr.iter().zip(prev.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / (frobenius(prev) + theta))
}

/// Like [`attention_step_diff`] but tolerates a grown key axis: keys absent at
/// one step count as zero attention.
fn padded_step_diff(curr: &Array2<f64>, prev: &Array2<f64>, theta: f64) -> Result<f64, ScheduleError> {
    if curr.nrows() != prev.nrows() {
        return Err(ScheduleError::ShapeMismatch(curr.dim(), prev.dim()));
    }
    if curr.ncols() == prev.ncols() {
        return attention_step_diff(curr, prev, theta);
    }
    let k = curr.ncols().max(prev.ncols());
    let get = |m: &Array2<f64>, i: usize, j: usize| if j < m.ncols() { m[[i, j]] } else { 0.0 };
    let mut sq = 0.0;
    for i in 0..curr.nrows() {
        for j in 0..k {
            let d = get(curr, i, j) - get(prev, i, j);
            sq += d * d;
        }
    }
    Ok(sq.sqrt() / (frobenius(prev) + theta))
}

/// Per-sample layer/head-mean attention change for `t = 1..S-1`.
pub fn sample_diffs(trace: &DenoiseTrace, theta: f64) -> Result<Vec<f64>, ScheduleError> {
    let mut out = Vec::with_capacity(trace.steps.len().saturating_sub(1));
    for pair in trace.steps.windows(2) {
        let (prev, curr) = (&pair[0], &pair[1]);
        if prev.layers() != curr.layers() || prev.heads() != curr.heads() {
            return Err(ScheduleError::InconsistentTraces(format!(
                "{}: layer/head count changes at step {}",
                trace.sample_id, curr.step
            )));
        }
        let (m, h) = (curr.layers(), curr.heads());
        let mut sum = 0.0;
        for (lc, lp) in curr.attn.iter().zip(&prev.attn) {
            for (ac, ap) in lc.iter().zip(lp) {
                sum += padded_step_diff(ac, ap, theta)?;
            }
        }
        out.push(if m * h == 0 { 0.0 } else { sum / (m * h) as f64 });
    }
    Ok(out)
}

fn sorted_batch(traces: &[DenoiseTrace]) -> Result<Vec<&DenoiseTrace>, ScheduleError> {
    let first = traces.first().ok_or_else(|| ScheduleError::InconsistentTraces("empty batch".into()))?;
    let s = first.total_steps();
    let (m, h) = first.steps.first().map_or((0, 0), |r| (r.layers(), r.heads()));
    for t in traces {
        if t.total_steps() != s {
            return Err(ScheduleError::InconsistentTraces(format!(
                "{} has {} steps, expected {s}",
                t.sample_id,
                t.total_steps()
            )));
        }
        for (u, r) in t.steps.iter().enumerate() {
            if r.step != u {
                return Err(ScheduleError::InconsistentTraces(format!(
                    "{}: record {u} has step index {}",
                    t.sample_id, r.step
                )));
            }
            if (r.layers(), r.heads()) != (m, h) {
                return Err(ScheduleError::InconsistentTraces(format!(
                    "{}: step {u} has {}x{} attention maps, expected {m}x{h}",
                    t.sample_id,
                    r.layers(),
                    r.heads()
                )));
            }
        }
    }
    let mut sorted: Vec<&DenoiseTrace> = traces.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(sorted)
}

/// Batch-mean attention change; element `i` is step `t = i + 1`.
pub fn aggregate_diffs(traces: &[DenoiseTrace], theta: f64) -> Result<Vec<f64>, ScheduleError> {
    let sorted = sorted_batch(traces)?;
    let per_sample: Vec<Vec<f64>> = sorted.iter().map(|t| sample_diffs(t, theta)).collect::<Result<_, _>>()?;
    let n = per_sample.len() as f64;
    let len = per_sample[0].len();
    Ok((0..len).map(|i| per_sample.iter().map(|d| d[i]).sum::<f64>() / n).collect())
}

/// Batch-mean SNR per step.
pub fn mean_snr(traces: &[DenoiseTrace]) -> Result<Vec<f64>, ScheduleError> {
    let sorted = sorted_batch(traces)?;
    let n = sorted.len() as f64;
    let s = sorted[0].total_steps();
    Ok((0..s).map(|u| sorted.iter().map(|t| t.steps[u].snr).sum::<f64>() / n).collect())
}

/// Moving averages of `diffs` (element `i` is step `i + 1`); element `j` of
/// the result is the average ending at step `j + w`.
pub fn moving_average(diffs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || diffs.len() < w {
        return Vec::new();
    }
    (w - 1..diffs.len())
        .map(|end| (0..w).map(|k| diffs[end - k]).sum::<f64>() / w as f64)
        .collect()
}

/// First step `t` whose trailing `w`-step mean of `diffs` is below `tau`.
/// `diffs[i]` belongs to step `i + 1`; the returned value is a step index.
pub fn detect_convergence(diffs: &[f64], w: usize, tau: f64) -> Result<usize, ScheduleError> {
    if w == 0 || diffs.len() < w {
        return Err(ScheduleError::SeriesTooShort { len: diffs.len(), w });
    }
    moving_average(diffs, w)
        .iter()
        .position(|&m| m < tau)
        .map(|j| j + w)
        .ok_or(ScheduleError::NoConvergence { tau })
}

/// Discrete curvature at interior points `t = 1..n-2`; element `i` is `t = i + 1`.
pub fn curvature_series(y: &[f64], x: &[f64]) -> Result<Vec<f64>, ScheduleError> {
    if y.len() != x.len() {
        return Err(ScheduleError::InconsistentTraces(format!("|y|={} but |x|={}", y.len(), x.len())));
    }
    if y.len() < 3 {
        return Err(ScheduleError::TooFewSteps(y.len()));
    }
    let increasing = x[1] > x[0];
    for i in 1..x.len() {
        let ok = if increasing { x[i] > x[i - 1] } else { x[i] < x[i - 1] };
        if !ok {
            return Err(ScheduleError::NonMonotoneAxis(i));
        }
    }
    (1..y.len() - 1)
        .map(|t| {
            let dx = x[t + 1] - x[t - 1];
            if dx == 0.0 {
                return Err(ScheduleError::DegenerateAxis(t));
            }
            let dy = (y[t + 1] - y[t - 1]) / dx;
            let half = dx / 2.0;
            let d2y = (y[t + 1] - 2.0 * y[t] + y[t - 1]) / (half * half);
            Ok(d2y.abs() / (1.0 + dy * dy).powf(1.5))
        })
        .collect()
}

/// Index of the first maximum.
fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The `(x, y)` curve whose curvature locates the relation step.
pub fn inflection_curve(snr: &[f64], mode: CurvatureMode, g: CurveTransform) -> (Vec<f64>, Vec<f64>) {
    match mode {
        CurvatureMode::IndexAxis => ((0..snr.len()).map(|t| t as f64).collect(), snr.to_vec()),
        CurvatureMode::LiteralSnrAxis => (snr.to_vec(), snr.iter().map(|&v| g.apply(v)).collect()),
    }
}

/// Maximum-curvature step of the mean SNR over steps `0..s_attr`.
pub fn inflection_from_snr(snr: &[f64], s_attr: usize, cfg: &ScheduleConfig) -> Result<usize, ScheduleError> {
    if s_attr < 3 || snr.len() < s_attr {
        return Err(ScheduleError::TooFewSteps(s_attr.min(snr.len())));
    }
    let (x, y) = inflection_curve(&snr[..s_attr], cfg.curvature_mode, cfg.g);
    let kappa = curvature_series(&y, &x)?;
    Ok(first_argmax(&kappa) + 1)
}

pub fn detect_inflection(traces: &[DenoiseTrace], s_attr: usize, cfg: &ScheduleConfig) -> Result<usize, ScheduleError> {
    inflection_from_snr(&mean_snr(traces)?, s_attr, cfg)
}

/// Strict schedule: any detector failure is returned as an error.
pub fn build_schedule(traces: &[DenoiseTrace], cfg: &ScheduleConfig) -> Result<InjectionSchedule, ScheduleError> {
    cfg.validate()?;
    let diffs = aggregate_diffs(traces, cfg.theta)?;
    let s_attr = detect_convergence(&diffs, cfg.w, cfg.tau)?;
    let s_rel = detect_inflection(traces, s_attr, cfg)?;
    let total = traces[0].total_steps();
    if s_rel >= s_attr {
        return Err(ScheduleError::OrderingViolation { s_rel, s_attr });
    }
    InjectionSchedule::new(s_rel, s_attr, total, cfg)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// No convergence; `s_attr` set to `round(S / 2)`.
    AttrMidpoint,
    /// Too few steps before `s_attr` for a curvature estimate; `s_rel = s_attr - 1`.
    RelBeforeAttr,
    /// Inflection at or after `s_attr`; clamped to `s_attr - 1`.
    RelClamped,
}

/// Schedule with the documented fallbacks applied instead of failing.
pub fn build_schedule_lenient(
    traces: &[DenoiseTrace],
    cfg: &ScheduleConfig,
) -> Result<(InjectionSchedule, Vec<Fallback>), ScheduleError> {
    cfg.validate()?;
    let total = traces.first().map_or(0, DenoiseTrace::total_steps);
    if total < 2 {
        return Err(ScheduleError::TooFewSteps(total));
    }
    let mut notes = Vec::new();
    let diffs = aggregate_diffs(traces, cfg.theta)?;
    let s_attr = match detect_convergence(&diffs, cfg.w, cfg.tau) {
        Ok(t) => t,
        Err(ScheduleError::NoConvergence { .. }) | Err(ScheduleError::SeriesTooShort { .. }) => {
            notes.push(Fallback::AttrMidpoint);
            ((0.5 * total as f64).round() as usize).clamp(1, total - 1)
        }
        Err(e) => return Err(e),
    };
    let s_rel = match detect_inflection(traces, s_attr, cfg) {
        Ok(t) if t < s_attr => t,
        Ok(_) => {
            notes.push(Fallback::RelClamped);
            s_attr - 1
        }
        Err(ScheduleError::TooFewSteps(_)) => {
            notes.push(Fallback::RelBeforeAttr);
            s_attr - 1
        }
        Err(e) => return Err(e),
    };
    Ok((InjectionSchedule::new(s_rel, s_attr, total, cfg)?, notes))
}

// ---- file formats ----

#[derive(Serialize, Deserialize)]
struct StepLine {
    step: usize,
    sigma: f64,
    snr: f64,
    attn: Vec<Vec<Vec<f64>>>,
    shape: [usize; 2],
}

pub fn write_trace<W: Write>(mut w: W, trace: &DenoiseTrace) -> std::io::Result<()> {
    for r in &trace.steps {
        let (q, k) = r.shape();
        let line = StepLine {
            step: r.step,
            sigma: r.sigma,
            snr: r.snr,
            attn: r.attn.iter().map(|l| l.iter().map(|a| a.iter().copied().collect()).collect()).collect(),
            shape: [q, k],
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_bytes(trace: &DenoiseTrace) -> Vec<u8> {
    let mut out = Vec::new();
    write_trace(&mut out, trace).expect("writing to a Vec cannot fail");
    out
}

pub fn read_trace<R: BufRead>(r: R, sample_id: &str) -> Result<DenoiseTrace, ScheduleError> {
    let bad = |message: String| ScheduleError::TraceFormat { path: sample_id.to_string(), message };
    let mut steps = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        let l: StepLine = serde_json::from_value(v).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        let [q, k] = l.shape;
        let attn = l
            .attn
            .into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|flat| {
                        Array2::from_shape_vec((q, k), flat)
                            .map_err(|e| bad(format!("line {}: attention does not match shape: {e}", n + 1)))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        steps.push(StepRecord { step: l.step, sigma: l.sigma, snr: l.snr, attn });
    }
    Ok(DenoiseTrace { sample_id: sample_id.to_string(), steps })
}

pub fn read_trace_file(path: &Path) -> Result<DenoiseTrace, ScheduleError> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    read_trace(BufReader::new(fs::File::open(path)?), &id)
}

/// Every `*.jsonl` file in `dir`, in sample-id order.
pub fn read_trace_dir(dir: &Path) -> Result<Vec<DenoiseTrace>, ScheduleError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_trace_file(p)).collect()
}

#[derive(Serialize, Deserialize)]
struct WindowsDoc {
    obj: [usize; 2],
    rel: [usize; 2],
    attr: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct ScheduleDoc {
    s_obj: usize,
    s_rel: usize,
    s_attr: usize,
    windows: WindowsDoc,
    config: ScheduleDocConfig,
}

#[derive(Serialize, Deserialize)]
struct ScheduleDocConfig {
    steps: usize,
    #[serde(flatten)]
    schedule: ScheduleConfig,
    #[serde(default)]
    fallbacks: Vec<Fallback>,
}

pub fn schedule_to_json(s: &InjectionSchedule, cfg: &ScheduleConfig, fallbacks: &[Fallback]) -> Vec<u8> {
    let w = |x: StepWindow| [x.0, x.1];
    let doc = ScheduleDoc {
        s_obj: s.s_obj,
        s_rel: s.s_rel,
        s_attr: s.s_attr,
        windows: WindowsDoc { obj: w(s.windows.obj), rel: w(s.windows.rel), attr: w(s.windows.attr) },
        config: ScheduleDocConfig { steps: s.total_steps, schedule: cfg.clone(), fallbacks: fallbacks.to_vec() },
    };
    serde_json::to_vec_pretty(&doc).expect("serializable")
}

pub fn schedule_from_json(bytes: &[u8]) -> Result<(InjectionSchedule, ScheduleConfig, Vec<Fallback>), ScheduleError> {
    let doc: ScheduleDoc = serde_json::from_slice(bytes).map_err(|e| ScheduleError::TraceFormat {
        path: "schedule.json".into(),
        message: e.to_string(),
    })?;
    let w = |x: [usize; 2]| StepWindow(x[0], x[1]);
    let s = InjectionSchedule {
        s_obj: doc.s_obj,
        s_rel: doc.s_rel,
        s_attr: doc.s_attr,
        total_steps: doc.config.steps,
        windows: Windows { obj: w(doc.windows.obj), rel: w(doc.windows.rel), attr: w(doc.windows.attr) },
    };
    if !s.is_ordered() {
        return Err(ScheduleError::OrderingViolation { s_rel: s.s_rel, s_attr: s.s_attr });
    }
    Ok((s, doc.config.schedule, doc.config.fallbacks))
}
