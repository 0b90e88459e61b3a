//! End-to-end run: parse, split, encode, calibrate, schedule, train, simulate.
//!
//! Every artifact lands under the output directory and is hashed into
//! `manifest.json`. Nothing written depends on wall-clock time or thread
//! count, so two runs with the same config and seed produce identical hashes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::caption_graph::{assemble_graph, encode_graph_json, PrimitiveSets};
use crate::caption_parser::{parse_rule_based, parse_with_llm, LlmClient, NetPolicy, ParserCache};
use crate::injection_schedule::{
    build_schedule_lenient, read_trace_file, schedule_to_json, trace_bytes, DenoiseTrace, Fallback, InjectionSchedule,
    ScheduleConfig,
};
use crate::rng::SeedTree;
use crate::split_text::{split_caption, PrimitiveKind, SplitTextCaption};
use crate::tensor_io::tseq_bytes;
use crate::token_encoding::{build_input_sequence, EncoderBank, EncoderDims};
use crate::toy_denoiser::{
    attention_mass_by_kind, denoise_run, InjectionOrder, InjectionPlan, NoiseConfig, NoiseSchedule, PrimitiveGroups,
    ToyModel, ToyModelConfig,
};
use crate::training::{
    caption_latent, checkpoint_bytes, item_from_split, synth_dataset, write_loss_curve, Activation, TrainConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParserMode {
    Llm,
    #[default]
    Rules,
}

/// Injection order for the final simulation, or no injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderSetting {
    Order(InjectionOrder),
    Off,
}

impl OrderSetting {
    pub fn label(&self) -> String {
        match self {
            Self::Order(o) => o.to_string(),
            Self::Off => "off".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("off") {
            return Some(Self::Off);
        }
        s.parse().ok().map(Self::Order)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub model: ToyModelConfig,
    pub noise: NoiseConfig,
    /// Runs recorded with every primitive injected from the first step; their
    /// traces drive schedule calibration.
    pub calibration_runs: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { model: ToyModelConfig::default(), noise: NoiseConfig::default(), calibration_runs: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub enabled: bool,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub lambda: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { enabled: true, steps: t.steps, lr: t.lr, batch_size: t.batch_size, dataset_size: t.dataset_size, lambda: t.loss.lambda }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub caption: Option<String>,
    pub caption_file: Option<PathBuf>,
    pub parser: ParserMode,
    pub cache_dir: Option<PathBuf>,
    pub encoder: EncoderDims,
    pub schedule: ScheduleConfig,
    pub sim: SimSection,
    pub train: TrainSection,
    /// `ORA`, any permutation of those letters, or `off`.
    pub order: String,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            caption: None,
            caption_file: None,
            parser: ParserMode::Rules,
            cache_dir: None,
            encoder: EncoderDims::default(),
            schedule: ScheduleConfig::default(),
            sim: SimSection::default(),
            train: TrainSection::default(),
            order: InjectionOrder::DEFAULT.to_string(),
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            dataset_size: self.train.dataset_size,
            model: self.sim.model.clone(),
            encoder: self.encoder.clone(),
            noise: self.sim.noise.clone(),
            seed: self.seed,
            ..Default::default()
        };
        t.loss.lambda = self.train.lambda;
        t
    }

    /// Hash of the config with the output location left out, so moving a run
    /// does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    fn caption_text(&self) -> Result<String, String> {
        match (&self.caption, &self.caption_file) {
            (Some(c), None) => Ok(c.clone()),
            (None, Some(p)) => fs::read_to_string(p).map(|s| s.trim().to_string()).map_err(|e| format!("{}: {e}", p.display())),
            (Some(_), Some(_)) => Err("give either a caption or a caption file, not both".into()),
            (None, None) => Err("no caption given".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Parse,
    Graph,
    Split,
    Encode,
    Calibrate,
    Schedule,
    Train,
    Simulate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Config => "config",
            Self::Parse => "parse",
            Self::Graph => "graph",
            Self::Split => "split",
            Self::Encode => "encode",
            Self::Calibrate => "calibrate",
            Self::Schedule => "schedule",
            Self::Train => "train",
            Self::Simulate => "simulate",
            Self::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError { stage, message: e.to_string() }
}

/// What a finished run reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub schedule: InjectionSchedule,
    pub fallbacks: Vec<Fallback>,
    pub manifest: BTreeMap<String, String>,
}

/// Writes artifacts relative to the run directory and remembers their hashes.
struct Artifacts {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Artifacts {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(at(Stage::Write))?;
        }
        fs::write(&path, bytes).map_err(|e| PipelineError { stage: Stage::Write, message: format!("{}: {e}", path.display()) })?;
        self.hashes.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Parses `caption` with the configured parser.
pub fn parse_caption(caption: &str, cfg: &PipelineConfig) -> Result<PrimitiveSets, PipelineError> {
    match cfg.parser {
        ParserMode::Rules => parse_rule_based(caption).map_err(at(Stage::Parse)),
        ParserMode::Llm => {
            let dir = cfg.cache_dir.clone().unwrap_or_else(|| PathBuf::from(".splitdit-cache"));
            let policy = NetPolicy { allow_network: std::env::var(crate::caption_parser::llm::ENV_URL).is_ok(), ..Default::default() };
            let client = LlmClient::from_env(ParserCache::new(dir), policy);
            parse_with_llm(caption, &client).map_err(at(Stage::Parse))
        }
    }
}

pub fn parse_order(s: &str) -> Result<OrderSetting, PipelineError> {
    OrderSetting::parse(s).ok_or_else(|| PipelineError { stage: Stage::Config, message: format!("invalid order {s:?}") })
}

/// Runs `count` calibration simulations with every primitive active from the
/// first step. Runs are independent and may execute in parallel.
pub fn calibration_traces(
    model: &ToyModel,
    cond: &crate::token_encoding::TokenSequence,
    groups: &PrimitiveGroups,
    noise: &NoiseSchedule,
    seeds: &SeedTree,
    count: usize,
) -> Result<Vec<DenoiseTrace>, PipelineError> {
    let plan = InjectionPlan::all_at_start();
    (0..count)
        .into_par_iter()
        .map(|i| {
            denoise_run(model, cond, groups, &plan, noise, &seeds.index(i as u64), &format!("calib_{i:03}"))
                .map(|(_, t)| t)
                .map_err(at(Stage::Calibrate))
        })
        .collect()
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let order = parse_order(&cfg.order)?;
    let caption = cfg.caption_text().map_err(at(Stage::Config))?;
    let root = SeedTree::new(cfg.seed);
    let mut out = Artifacts { root: cfg.out_dir.clone(), hashes: BTreeMap::new() };
    fs::create_dir_all(&cfg.out_dir).map_err(at(Stage::Write))?;
    // Recorded relative to the run directory so a run can be moved.
    let mut recorded = cfg.clone();
    recorded.out_dir = PathBuf::from(".");
    let config_json = serde_json::to_vec_pretty(&recorded).expect("config serializes");
    out.put("config.json", &config_json)?;

    let prims = parse_caption(&caption, cfg)?;
    let graph = assemble_graph(&caption, &prims).map_err(at(Stage::Graph))?;
    out.put("graph.json", &encode_graph_json(&graph))?;

    let mut split = split_caption(&graph);
    let dropped = split.fit_token_budget(cfg.encoder.max_len);
    if dropped > 0 {
        log::warn!("dropped {dropped} trailing sentences to fit {} tokens", cfg.encoder.max_len);
    }
    if split.sentences.is_empty() {
        return Err(PipelineError { stage: Stage::Split, message: "split caption is empty".into() });
    }
    out.put("split.json", &split.to_json())?;
    out.put("split.txt", format!("{}\n", split.plain_text()).as_bytes())?;

    let bank = EncoderBank::new(&cfg.encoder, &root.child("encoders")).map_err(at(Stage::Encode))?;
    if bank.model_dim() != cfg.sim.model.dim {
        return Err(PipelineError {
            stage: Stage::Encode,
            message: format!("encoder width {} vs model width {}", bank.model_dim(), cfg.sim.model.dim),
        });
    }
    let cond = build_input_sequence(&split, &caption, &bank).map_err(at(Stage::Encode))?;
    let groups = PrimitiveGroups::from_split(&split, &bank).map_err(at(Stage::Encode))?;
    out.put("tokens/T.tseq", &tseq_bytes(&cond.tokens))?;
    for kind in PrimitiveKind::ALL {
        if let Some(t) = groups.get(kind) {
            out.put(&format!("tokens/prim_{}.tseq", kind.letter()), &tseq_bytes(&t.tokens))?;
        }
    }

    let noise = NoiseSchedule::from_config(&cfg.sim.noise, &root.child("noise")).map_err(at(Stage::Config))?;
    let base_model = ToyModel::new(cfg.sim.model.clone(), &root.child("model")).map_err(at(Stage::Config))?;
    let calib = calibration_traces(&base_model, &cond, &groups, &noise, &root.child("calibrate"), cfg.sim.calibration_runs.max(1))?;
    for t in &calib {
        out.put(&format!("traces/{}.jsonl", t.sample_id), &trace_bytes(t))?;
    }

    // Closed loop: the schedule is derived from the traces as written.
    let reread: Vec<DenoiseTrace> = calib
        .iter()
        .map(|t| read_trace_file(&cfg.out_dir.join(format!("traces/{}.jsonl", t.sample_id))))
        .collect::<Result<_, _>>()
        .map_err(at(Stage::Schedule))?;
    let (schedule, fallbacks) = build_schedule_lenient(&reread, &cfg.schedule).map_err(at(Stage::Schedule))?;
    for f in &fallbacks {
        log::warn!("schedule fallback applied: {f:?}");
    }
    out.put("schedule.json", &schedule_to_json(&schedule, &cfg.schedule, &fallbacks))?;

    let plan = match order {
        OrderSetting::Order(o) => InjectionPlan::from_schedule(&schedule, o),
        OrderSetting::Off => InjectionPlan::disabled(),
    };
    let tcfg = cfg.train_config();
    let reference = caption_latent(&split, cfg.sim.model.latent_tokens, cfg.sim.model.dim, 0.0, &root.child("reference"));
    let (model, losses) = if cfg.train.enabled && tcfg.steps > 0 {
        let act = Activation { plan: plan.clone(), noise: noise.clone() };
        let own = item_from_split(&caption, split.clone(), &bank, &cfg.sim.model, tcfg.data_noise, &root.child("own"))
            .map_err(at(Stage::Train))?;
        let mut data = vec![own];
        data.extend(synth_dataset(&tcfg, &bank, &root.child("data")).map_err(at(Stage::Train))?);
        let outcome = crate::training::train_model(&tcfg, base_model, &act, &data, &root.child("train")).map_err(at(Stage::Train))?;
        (outcome.model, outcome.losses)
    } else {
        (base_model, Vec::new())
    };
    if !losses.is_empty() {
        out.put("checkpoint.bin", &checkpoint_bytes(&model, &tcfg.hash()))?;
        let mut curve = Vec::new();
        write_loss_curve(&mut curve, &losses).map_err(at(Stage::Write))?;
        out.put("loss_curve.csv", &curve)?;
    }

    let (latent, trace) =
        denoise_run(&model, &cond, &groups, &plan, &noise, &root.child("sample"), "run_000").map_err(at(Stage::Simulate))?;
    out.put("traces/run_000.jsonl", &trace_bytes(&trace))?;
    out.put("latent.tseq", &tseq_bytes(&latent))?;
    let metrics = run_metrics(&order, &plan, &schedule, &trace, &groups, &split, &latent, &reference, &losses);
    out.put("metrics.json", &serde_json::to_vec_pretty(&metrics).expect("metrics serialize"))?;

    let manifest = Manifest { config_hash: cfg.hash(), seed: cfg.seed, files: out.hashes.clone() };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(cfg.out_dir.join(MANIFEST), bytes).map_err(at(Stage::Write))?;
    Ok(RunSummary { schedule, fallbacks, manifest: out.hashes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Relative path to SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

pub fn read_manifest(dir: &Path) -> std::io::Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST))?;
    serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Per-run measurements consumed by the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub order: String,
    pub s_rel: usize,
    pub s_attr: usize,
    /// Mean squared distance between the sampled latent and the caption's
    /// noise-free reference latent.
    pub latent_mse: f64,
    pub final_train_loss: Option<f64>,
    /// Injection attention mass per kind letter at each step.
    pub attention_mass: BTreeMap<char, Vec<f64>>,
    /// Mass per kind averaged over the early and late denoising stages.
    pub stage_mass: BTreeMap<String, BTreeMap<char, f64>>,
    pub group_tokens: BTreeMap<char, usize>,
    pub split_text: String,
}

#[allow(clippy::too_many_arguments)]
fn run_metrics(
    order: &OrderSetting,
    plan: &InjectionPlan,
    schedule: &InjectionSchedule,
    trace: &DenoiseTrace,
    groups: &PrimitiveGroups,
    split: &SplitTextCaption,
    latent: &Array2<f64>,
    reference: &Array2<f64>,
    losses: &[f64],
) -> RunMetrics {
    let mass = attention_mass_by_kind(trace, plan, groups);
    let s = trace.steps.len();
    // Early and late quarters of the trajectory.
    let stages = [("early", 0..s.div_ceil(4)), ("late", (3 * s) / 4..s)];
    let stage_mass = stages
        .iter()
        .map(|(name, range)| {
            let per_kind = mass
                .iter()
                .map(|(k, series)| {
                    let vals = &series[range.clone()];
                    (*k, if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 })
                })
                .collect();
            (name.to_string(), per_kind)
        })
        .collect();
    let diff = latent - reference;
    RunMetrics {
        order: order.label(),
        s_rel: schedule.s_rel,
        s_attr: schedule.s_attr,
        latent_mse: diff.iter().map(|d| d * d).sum::<f64>() / diff.len().max(1) as f64,
        final_train_loss: losses.last().copied(),
        attention_mass: mass,
        stage_mass,
        group_tokens: PrimitiveKind::ALL.iter().map(|k| (k.letter(), groups.get(*k).map_or(0, |t| t.len()))).collect(),
        split_text: split.plain_text(),
    }
}
