//! `split-dit`: command-line driver for the split-text conditioning pipeline.
//!
//! Exit status is 0 on success, 1 when a pipeline stage fails (the stage is
//! named on stderr) and 2 for usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use splitdit_core::caption_graph::{assemble_graph, encode_graph_json};
use splitdit_core::injection_schedule::{
    build_schedule, build_schedule_lenient, read_trace_dir, schedule_from_json, schedule_to_json, trace_bytes,
    CurvatureMode, CurveTransform, InjectionSchedule, ScheduleConfig,
};
use splitdit_core::pipeline::{parse_caption, parse_order, run_pipeline, OrderSetting, ParserMode, PipelineConfig};
use splitdit_core::report::generate_report;
use splitdit_core::rng::SeedTree;
use splitdit_core::split_text::{split_caption, PrimitiveKind, SplitTextCaption};
use splitdit_core::tensor_io::tseq_bytes;
use splitdit_core::token_encoding::{build_input_sequence, EncoderBank, EncoderDims};
use splitdit_core::toy_denoiser::{
    denoise_run, InjectionPlan, NoiseSchedule, PlannedSchedule, PrimitiveGroups, SimulationConfig, ToyModel,
};
use splitdit_core::training::{read_checkpoint, train_toy, write_checkpoint, write_loss_curve, TrainConfig};

#[derive(Parser)]
#[command(name = "split-dit", version, about = "Split-text caption conditioning for a toy diffusion transformer")]
struct Cli {
    /// Root seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent runs and data synthesis.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// JSON config file for the subcommand; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a caption into a caption graph.
    Parse {
        #[command(flatten)]
        caption: CaptionArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the split-text caption.
    Split {
        #[command(flatten)]
        caption: CaptionArgs,
        /// Print the joined sentences instead of JSON.
        #[arg(long)]
        text: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the conditioning sequence and primitive groups as .tseq files.
    Encode {
        #[command(flatten)]
        caption: CaptionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive injection steps from a directory of trace files.
    Schedule {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        g: Option<TransformArg>,
        /// Fail instead of applying fallbacks.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the toy denoiser and write its traces.
    Simulate {
        #[command(flatten)]
        caption: CaptionArgs,
        /// Schedule file from `schedule` or `run`.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        s_rel: Option<usize>,
        #[arg(long)]
        s_attr: Option<usize>,
        /// `ORA`, a permutation of it, `off`, or `all` (every primitive from step 0).
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on synthetic captions.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: parse, split, encode, calibrate, schedule, train, simulate.
    Run {
        #[command(flatten)]
        caption: CaptionArgs,
        /// `ORA`, a permutation of it, or `off`.
        #[arg(long)]
        order: Option<String>,
        /// Training steps; 0 skips training.
        #[arg(long)]
        train_steps: Option<usize>,
        /// Simulator runs used to calibrate the schedule.
        #[arg(long)]
        calibration_runs: Option<usize>,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct CaptionArgs {
    #[arg(long, conflicts_with = "caption_file")]
    caption: Option<String>,
    /// Read the caption from a file instead.
    #[arg(long)]
    caption_file: Option<PathBuf>,
    /// Primitive extractor; `llm` replays the cache and only goes online when SPLITDIT_LLM_URL is set.
    #[arg(long, value_enum)]
    parser: Option<ParserArg>,
    /// Parser cache directory.
    #[arg(long, env = "SPLITDIT_CACHE")]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParserArg {
    Llm,
    Rules,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Index,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Log,
    Identity,
}

struct Failure {
    stage: String,
    message: String,
}

impl Failure {
    fn new(stage: impl ToString, message: impl ToString) -> Self {
        Self { stage: stage.to_string(), message: message.to_string() }
    }
}

fn stage<E: ToString>(name: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure::new(name, e)
}

impl From<splitdit_core::pipeline::PipelineError> for Failure {
    fn from(e: splitdit_core::pipeline::PipelineError) -> Self {
        Failure::new(e.stage, e.message)
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Failure::new("config", format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| Failure::new("config", format!("{}: {e}", p.display())))
        }
    }
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::new("write", format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            let mut so = std::io::stdout().lock();
            so.write_all(bytes).and_then(|_| so.write_all(b"\n")).map_err(stage("write"))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(stage("write"))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::new("write", format!("{}: {e}", path.display())))
}

/// Pipeline config from `--config`, with caption flags applied on top.
fn pipeline_config(cli: &Cli, caption: &CaptionArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg: PipelineConfig = load_json(cli.config.as_deref())?;
    if caption.caption.is_some() || caption.caption_file.is_some() {
        cfg.caption = caption.caption.clone();
        cfg.caption_file = caption.caption_file.clone();
    }
    if let Some(p) = caption.parser {
        cfg.parser = match p {
            ParserArg::Llm => ParserMode::Llm,
            ParserArg::Rules => ParserMode::Rules,
        };
    }
    if let Some(c) = &caption.cache {
        cfg.cache_dir = Some(c.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cfg.caption.is_none() && cfg.caption_file.is_none() {
        usage_error("a caption is required: pass --caption, --caption-file, or a config with one");
    }
    Ok(cfg)
}

fn caption_text(cfg: &PipelineConfig) -> Result<String, Failure> {
    match (&cfg.caption, &cfg.caption_file) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(p)) => fs::read_to_string(p)
            .map(|s| s.trim().to_string())
            .map_err(|e| Failure::new("config", format!("{}: {e}", p.display()))),
        (None, None) => Err(Failure::new("config", "no caption")),
    }
}

fn split_for(cfg: &PipelineConfig, caption: &str) -> Result<SplitTextCaption, Failure> {
    let prims = parse_caption(caption, cfg)?;
    let graph = assemble_graph(caption, &prims).map_err(stage("graph"))?;
    let mut split = split_caption(&graph);
    split.fit_token_budget(cfg.encoder.max_len);
    Ok(split)
}

fn bank_for(dims: &EncoderDims, root: &SeedTree) -> Result<EncoderBank, Failure> {
    EncoderBank::new(dims, &root.child("encoders")).map_err(stage("encode"))
}

/// Flag overrides for `w`, `tau`, `theta`, curvature mode and transform.
type ScheduleOverrides = (Option<usize>, Option<f64>, Option<f64>, Option<ModeArg>, Option<TransformArg>);

fn cmd_schedule(
    traces: &Path,
    overrides: ScheduleOverrides,
    strict: bool,
    out: Option<&Path>,
    config: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg: ScheduleConfig = load_json(config)?;
    let (w, tau, theta, mode, g) = overrides;
    if let Some(w) = w {
        cfg.w = w;
    }
    if let Some(t) = tau {
        cfg.tau = t;
    }
    if let Some(t) = theta {
        cfg.theta = t;
    }
    if let Some(m) = mode {
        cfg.curvature_mode = match m {
            ModeArg::Index => CurvatureMode::IndexAxis,
            ModeArg::Literal => CurvatureMode::LiteralSnrAxis,
        };
    }
    if let Some(g) = g {
        cfg.g = match g {
            TransformArg::Log => CurveTransform::Log,
            TransformArg::Identity => CurveTransform::Identity,
        };
    }
    let batch = read_trace_dir(traces).map_err(stage("schedule"))?;
    let (sched, fallbacks) = if strict {
        (build_schedule(&batch, &cfg).map_err(stage("schedule"))?, Vec::new())
    } else {
        build_schedule_lenient(&batch, &cfg).map_err(stage("schedule"))?
    };
    for f in &fallbacks {
        log::warn!("schedule fallback applied: {f:?}");
    }
    write_out(out, &schedule_to_json(&sched, &cfg, &fallbacks))
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cli: &Cli,
    caption: &CaptionArgs,
    schedule_file: Option<&Path>,
    s_rel: Option<usize>,
    s_attr: Option<usize>,
    order: Option<&str>,
    steps: Option<usize>,
    runs: usize,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let mut sim: SimulationConfig = load_json(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        sim.seed = s;
    }
    if let Some(s) = steps {
        sim.noise.steps = s;
    }
    let mut pcfg = PipelineConfig { seed: sim.seed, ..Default::default() };
    pcfg.caption = caption.caption.clone();
    pcfg.caption_file = caption.caption_file.clone();
    if let Some(ParserArg::Llm) = caption.parser {
        pcfg.parser = ParserMode::Llm;
    }
    pcfg.cache_dir = caption.cache.clone();
    pcfg.encoder.model = sim.model.dim;
    if pcfg.caption.is_none() && pcfg.caption_file.is_none() {
        usage_error("simulate needs --caption or --caption-file");
    }
    let text = caption_text(&pcfg)?;
    let root = SeedTree::new(sim.seed);
    let split = split_for(&pcfg, &text)?;
    let bank = bank_for(&pcfg.encoder, &root)?;
    let cond = build_input_sequence(&split, &text, &bank).map_err(stage("encode"))?;
    let groups = PrimitiveGroups::from_split(&split, &bank).map_err(stage("encode"))?;
    let model = match checkpoint {
        Some(p) => read_checkpoint(&fs::read(p).map_err(stage("simulate"))?).map_err(stage("simulate"))?.0,
        None => ToyModel::new(sim.model.clone(), &root.child("model")).map_err(stage("simulate"))?,
    };
    let noise = NoiseSchedule::from_config(&sim.noise, &root.child("noise")).map_err(stage("simulate"))?;

    let order_str = order.map(str::to_string).or_else(|| sim.schedule.as_ref().map(|s| s.order.clone())).unwrap_or_else(|| "ORA".into());
    let plan = if order_str.eq_ignore_ascii_case("all") {
        InjectionPlan::all_at_start()
    } else {
        let schedule: InjectionSchedule = match schedule_file {
            Some(p) => schedule_from_json(&fs::read(p).map_err(stage("simulate"))?).map_err(stage("simulate"))?.0,
            None => {
                let planned = sim.schedule.clone().unwrap_or(PlannedSchedule { s_rel: 8, s_attr: 30, order: order_str.clone() });
                InjectionSchedule::new(s_rel.unwrap_or(planned.s_rel), s_attr.unwrap_or(planned.s_attr), noise.steps(), &ScheduleConfig::default())
                    .map_err(stage("simulate"))?
            }
        };
        match parse_order(&order_str)? {
            OrderSetting::Order(o) => InjectionPlan::from_schedule(&schedule, o),
            OrderSetting::Off => InjectionPlan::disabled(),
        }
    };
    let results: Vec<_> = (0..runs.max(1))
        .into_par_iter()
        .map(|i| {
            denoise_run(&model, &cond, &groups, &plan, &noise, &root.child("sample").index(i as u64), &format!("run_{i:03}"))
        })
        .collect::<Result<_, _>>()
        .map_err(stage("simulate"))?;
    for (latent, trace) in &results {
        write_file(&out.join(format!("traces/{}.jsonl", trace.sample_id)), &trace_bytes(trace))?;
        write_file(&out.join(format!("{}.tseq", trace.sample_id)), &tseq_bytes(latent))?;
    }
    println!("wrote {} trace(s) to {}", results.len(), out.join("traces").display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Parse { caption, out } => {
            let cfg = pipeline_config(cli, caption)?;
            let text = caption_text(&cfg)?;
            let prims = parse_caption(&text, &cfg)?;
            let graph = assemble_graph(&text, &prims).map_err(stage("graph"))?;
            write_out(out.as_deref(), &encode_graph_json(&graph))
        }
        Command::Split { caption, text, out } => {
            let cfg = pipeline_config(cli, caption)?;
            let caption = caption_text(&cfg)?;
            let split = split_for(&cfg, &caption)?;
            let bytes = if *text { split.plain_text().into_bytes() } else { split.to_json() };
            write_out(out.as_deref(), &bytes)
        }
        Command::Encode { caption, out } => {
            let cfg = pipeline_config(cli, caption)?;
            let text = caption_text(&cfg)?;
            let split = split_for(&cfg, &text)?;
            let bank = bank_for(&cfg.encoder, &SeedTree::new(cfg.seed))?;
            let t = build_input_sequence(&split, &text, &bank).map_err(stage("encode"))?;
            let groups = PrimitiveGroups::from_split(&split, &bank).map_err(stage("encode"))?;
            write_file(&out.join("T.tseq"), &tseq_bytes(&t.tokens))?;
            println!("T: {} x {}", t.len(), t.dim());
            for kind in PrimitiveKind::ALL {
                if let Some(g) = groups.get(kind) {
                    write_file(&out.join(format!("prim_{}.tseq", kind.letter())), &tseq_bytes(&g.tokens))?;
                    println!("{kind}: {} x {}", g.len(), g.dim());
                }
            }
            Ok(())
        }
        Command::Schedule { traces, w, tau, theta, mode, g, strict, out } => {
            cmd_schedule(traces, (*w, *tau, *theta, *mode, *g), *strict, out.as_deref(), cli.config.as_deref())
        }
        Command::Simulate { caption, schedule, s_rel, s_attr, order, steps, runs, checkpoint, out } => cmd_simulate(
            cli,
            caption,
            schedule.as_deref(),
            *s_rel,
            *s_attr,
            order.as_deref(),
            *steps,
            *runs,
            checkpoint.as_deref(),
            out,
        ),
        Command::Train { steps, lr, lambda, batch_size, out } => {
            let mut cfg: TrainConfig = load_json(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            if let Some(l) = lr {
                cfg.lr = *l;
            }
            if let Some(l) = lambda {
                cfg.loss.lambda = *l;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = *b;
            }
            let outcome = train_toy(&cfg).map_err(stage("train"))?;
            fs::create_dir_all(out).map_err(stage("write"))?;
            write_checkpoint(&out.join("checkpoint.bin"), &outcome.model, &cfg.hash()).map_err(stage("write"))?;
            let mut curve = Vec::new();
            write_loss_curve(&mut curve, &outcome.losses).map_err(stage("write"))?;
            write_file(&out.join("loss_curve.csv"), &curve)?;
            let s = outcome.smoothed(cfg.smoothing);
            if let (Some(a), Some(b)) = (s.first(), s.last()) {
                println!("smoothed loss {a:.5} -> {b:.5} (ratio {:.4})", b / a);
            }
            Ok(())
        }
        Command::Run { caption, order, train_steps, calibration_runs, out } => {
            let mut cfg = pipeline_config(cli, caption)?;
            if let Some(o) = order {
                cfg.order = o.clone();
            }
            if let Some(s) = train_steps {
                cfg.train.steps = *s;
                cfg.train.enabled = *s > 0;
            }
            if let Some(n) = calibration_runs {
                cfg.sim.calibration_runs = *n;
            }
            if let Some(o) = out {
                cfg.out_dir = o.clone();
            }
            let summary = run_pipeline(&cfg)?;
            let s = &summary.schedule;
            println!("schedule: s_obj={} s_rel={} s_attr={} of {} steps", s.s_obj, s.s_rel, s.s_attr, s.total_steps);
            if !summary.fallbacks.is_empty() {
                println!("fallbacks: {:?}", summary.fallbacks);
            }
            println!("{} artifacts in {}", summary.manifest.len() + 1, cfg.out_dir.display());
            Ok(())
        }
        Command::Report { runs, json } => {
            let report = generate_report(runs).map_err(stage("report"))?;
            print!("{}", report.to_text());
            if let Some(p) = json {
                write_file(p, &report.to_json())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        usage_error("--threads must be at least 1");
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already initialised: {e}");
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("split-dit: stage {} failed: {}", f.stage, f.message);
            ExitCode::from(1)
        }
    }
}
