use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splitdit_core::autodiff::softmax_rows;
use splitdit_core::caption_graph::assemble_graph;
use splitdit_core::caption_parser::parse_rule_based;
use splitdit_core::caption_parser::synth::random_caption;
use splitdit_core::injection_schedule::{
    aggregate_diffs, attention_step_diff, curvature_series, detect_convergence, inflection_from_snr, moving_average,
    DenoiseTrace, InjectionSchedule, ScheduleConfig, StepRecord,
};
use splitdit_core::rng::SeedTree;
use splitdit_core::split_text::{split_caption, PrimitiveKind};
use splitdit_core::tensor_io::{read_tseq, tseq_bytes};
use splitdit_core::token_encoding::{toy_encode, EncoderSpec};
use splitdit_core::toy_denoiser::{snr_of_step, InjectionOrder, InjectionPlan, NoiseSchedule};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    matrix(rows, cols).prop_map(|m| softmax_rows(&m))
}

proptest! {
    #[test]
    fn step_diff_zero_on_self_and_nonnegative(a in matrix(3, 4), b in matrix(3, 4)) {
        prop_assert_eq!(attention_step_diff(&a, &a, 1e-8).unwrap(), 0.0);
        prop_assert!(attention_step_diff(&a, &b, 1e-8).unwrap() >= 0.0);
    }

    #[test]
    fn softmax_rows_are_distributions(m in matrix(4, 7)) {
        let s = softmax_rows(&m);
        for row in s.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn convergence_is_minimal(d in prop::collection::vec(0.0..3e-4f64, 3..60), w in 1usize..6) {
        let avg = moving_average(&d, w);
        match detect_convergence(&d, w, 1e-4) {
            Ok(t) => {
                prop_assert!(t >= w && avg[t - w] < 1e-4);
                prop_assert!(avg[..t - w].iter().all(|m| *m >= 1e-4));
            }
            Err(_) => prop_assert!(d.len() < w || avg.iter().all(|m| *m >= 1e-4)),
        }
    }

    #[test]
    fn affine_curvature_vanishes(a in -50.0..50.0f64, b in -50.0..50.0f64, n in 3usize..80) {
        let x: Vec<f64> = (0..n).map(|t| t as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!(curvature_series(&y, &x).unwrap().iter().all(|k| k.abs() <= 1e-9));
    }

    #[test]
    fn inflection_is_first_argmax(snr in prop::collection::vec(0.0..100.0f64, 4..40), cut in 0.0..1.0f64) {
        let s_attr = 3 + ((snr.len() - 3) as f64 * cut) as usize;
        let s_attr = s_attr.min(snr.len());
        let t = inflection_from_snr(&snr, s_attr, &ScheduleConfig::default()).unwrap();
        let x: Vec<f64> = (0..s_attr).map(|t| t as f64).collect();
        let k = curvature_series(&snr[..s_attr], &x).unwrap();
        let best = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = k.iter().position(|v| *v == best).unwrap() + 1;
        prop_assert_eq!(t, first);
        prop_assert!(t >= 1 && t < s_attr);
    }

    #[test]
    fn reduction_ignores_batch_order(seed in any::<u64>(), n in 2usize..5, rot in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traces: Vec<DenoiseTrace> = (0..n)
            .map(|i| DenoiseTrace {
                sample_id: format!("s{i}"),
                steps: (0..6)
                    .map(|u| StepRecord {
                        step: u,
                        sigma: 0.5,
                        snr: 1.0,
                        attn: vec![vec![softmax_rows(&Array2::from_shape_simple_fn((2, 3), || rand::Rng::random_range(&mut rng, -2.0..2.0)))]],
                    })
                    .collect(),
            })
            .collect();
        let mut shuffled = traces.clone();
        shuffled.rotate_left(rot % n);
        prop_assert_eq!(aggregate_diffs(&traces, 1e-8).unwrap(), aggregate_diffs(&shuffled, 1e-8).unwrap());
    }

    #[test]
    fn split_laws_hold(seed in any::<u64>()) {
        let caption = random_caption(&mut ChaCha8Rng::seed_from_u64(seed));
        let g = assemble_graph(&caption, &parse_rule_based(&caption).unwrap()).unwrap();
        let split = split_caption(&g);
        let attrs: usize = g.nodes.iter().map(|n| n.attributes.len()).sum();
        prop_assert_eq!(split.sentences.len(), g.nodes.len() + g.edges.len() + attrs);
        prop_assert!(split.sentences.windows(2).all(|w| w[0].kind <= w[1].kind));
        prop_assert_eq!(split.of_kind(PrimitiveKind::Object).len(), g.nodes.len());
    }

    #[test]
    fn active_set_is_monotone(s_rel in 1usize..20, gap in 1usize..20, extra in 1usize..10, which in 0usize..6) {
        let s_attr = s_rel + gap;
        let total = s_attr + extra;
        let sched = InjectionSchedule::new(s_rel, s_attr, total, &ScheduleConfig::default()).unwrap();
        let plan = InjectionPlan::from_schedule(&sched, InjectionOrder::all()[which]);
        let mut prev: Vec<PrimitiveKind> = Vec::new();
        let mut changes = Vec::new();
        for u in 0..total {
            let now = plan.active_kinds(u);
            prop_assert!(prev.iter().all(|k| now.contains(k)));
            if now.len() != prev.len() && u > 0 {
                changes.push(u);
            }
            prev = now;
        }
        prop_assert_eq!(changes, vec![s_rel, s_attr]);
        prop_assert_eq!(prev.len(), 3);
    }

    #[test]
    fn snr_rises_along_the_sampler(seed in any::<u64>(), steps in 2usize..80) {
        let noise = NoiseSchedule::random_uniform(steps, 1000, &SeedTree::new(seed)).unwrap();
        prop_assert!(noise.is_valid());
        for u in 1..steps {
            prop_assert!(snr_of_step(u, &noise) > snr_of_step(u - 1, &noise));
        }
    }

    #[test]
    fn toy_encoding_is_pure_and_truncates(words in prop::collection::vec("[a-z]{1,6}", 1..30), max_len in 1usize..20, seed in any::<u64>()) {
        let text = words.join(" ");
        let spec = EncoderSpec::new("enc", 8, max_len, seed);
        let a = toy_encode(&text, &spec).unwrap();
        prop_assert_eq!(a.len(), words.len().min(max_len));
        prop_assert_eq!(&a, &toy_encode(&text, &spec).unwrap());
    }

    #[test]
    fn tseq_round_trips_at_f32(m in stochastic(5, 3)) {
        let back = read_tseq(&tseq_bytes(&m)[..]).unwrap();
        prop_assert_eq!(back, m.mapv(|v| v as f32 as f64));
    }
}
