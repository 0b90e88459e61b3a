use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitdit_core::caption_graph::assemble_graph;
use splitdit_core::caption_parser::parse_rule_based;
use splitdit_core::caption_parser::synth::random_caption;
use splitdit_core::injection_schedule::{curvature_series, detect_convergence, InjectionSchedule, ScheduleConfig};
use splitdit_core::rng::SeedTree;
use splitdit_core::split_text::split_caption;
use splitdit_core::token_encoding::{build_input_sequence, EncoderBank, EncoderDims};
use splitdit_core::toy_denoiser::{denoise_run, InjectionOrder, InjectionPlan, NoiseSchedule, PrimitiveGroups, ToyModel, ToyModelConfig};

fn detectors(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let diffs: Vec<f64> = (0..1000).map(|i| 0.5 * 0.99f64.powi(i) * rng.random_range(0.5..1.5)).collect();
    c.bench_function("detect_convergence/1000", |b| b.iter(|| detect_convergence(black_box(&diffs), 3, 1e-4)));
    let x: Vec<f64> = (0..1000).map(|t| t as f64).collect();
    c.bench_function("curvature_series/1000", |b| b.iter(|| curvature_series(black_box(&diffs), &x)));
}

fn parsing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let captions: Vec<String> = (0..100).map(|_| random_caption(&mut rng)).collect();
    c.bench_function("parse_split/100 captions", |b| {
        b.iter(|| {
            for cap in &captions {
                let g = assemble_graph(cap, &parse_rule_based(cap).unwrap()).unwrap();
                black_box(split_caption(&g));
            }
        })
    });
}

fn simulation(c: &mut Criterion) {
    let caption = "a red ball on a wooden table beside a small box";
    let g = assemble_graph(caption, &parse_rule_based(caption).unwrap()).unwrap();
    let split = split_caption(&g);
    let root = SeedTree::new(2);
    let bank = EncoderBank::new(&EncoderDims::default(), &root.child("enc")).unwrap();
    let cond = build_input_sequence(&split, caption, &bank).unwrap();
    let groups = PrimitiveGroups::from_split(&split, &bank).unwrap();
    let model = ToyModel::new(ToyModelConfig::default(), &root.child("model")).unwrap();
    let noise = NoiseSchedule::uniform_grid(40);
    let sched = InjectionSchedule::new(8, 30, 40, &ScheduleConfig::default()).unwrap();
    let plan = InjectionPlan::from_schedule(&sched, InjectionOrder::DEFAULT);
    c.bench_function("denoise_run/40 steps", |b| {
        b.iter(|| denoise_run(&model, &cond, &groups, &plan, &noise, &root, "bench").unwrap())
    });
}

criterion_group!(benches, detectors, parsing, simulation);
criterion_main!(benches);
