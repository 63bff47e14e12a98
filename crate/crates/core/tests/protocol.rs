mod common;

use bofa::bridge::{BridgeState, TrainConfig};
use bofa::harness::format::TextPrototypes;
use bofa::harness::{run_protocol, synth_stream, Method, Pipeline, RunConfig, RunMetrics, SynthConfig, TaskStream};
use bofa::inference;
use bofa::matrixkit::{self, matmul};
use bofa::prototypes::PrototypeBank;
use bofa::{LabeledFeatures, Matrix};
use common::*;
use proptest::prelude::*;

#[test]
fn single_task_stream_metrics_collapse() {
    let bench = synth_stream(&SynthConfig { tasks: 1, ..small_synth(3) }).unwrap();
    let m = run_protocol(&bench.stream, &small_config(Method::Bofa)).unwrap();
    assert_eq!(m.stage_accuracies.len(), 1);
    assert_eq!(m.final_accuracy(), m.stage_accuracies[0]);
    assert_eq!(m.average_accuracy(), m.stage_accuracies[0]);
}

/// Every class is a single repeated point on its own axis; text prototypes
/// sit exactly on the projected class points.
#[test]
fn degenerate_separable_stream_is_perfect() {
    let (d_o, d, classes, per) = (8usize, 8usize, 6u32, 4usize);
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for c in 0..classes {
        let mut x = vec![0.0; d_o];
        x[c as usize] = 1.0;
        for _ in 0..per {
            labels.push(c);
            rows.push(x.clone());
        }
    }
    let data = LabeledFeatures::new(labels, Matrix::from_rows(&rows).unwrap()).unwrap();
    let w0 = Matrix::identity(d_o);
    let text = TextPrototypes::new((0..classes).collect(), Matrix::identity(d).select_rows(&[0, 1, 2, 3, 4, 5])).unwrap();
    let stream = TaskStream::from_pool(&data, &data, text, w0, 2, 2, 1993).unwrap();
    for method in [Method::Bofa, Method::Finetune, Method::Lora] {
        let cfg = RunConfig { method, k: Some(2), inc_n: 2, ..small_config(method) };
        let m = run_protocol(&stream, &cfg).unwrap();
        assert_eq!(m.stage_accuracies, vec![1.0; 3], "{method:?}");
    }
}

#[test]
fn metrics_examples() {
    let m = RunMetrics::new(vec![1.0], vec![None], 0.0).unwrap();
    assert_eq!((m.average_accuracy(), m.final_accuracy()), (1.0, 1.0));
    let m = RunMetrics::new(vec![0.8, 0.6], vec![None, Some(0.5)], 0.0).unwrap();
    assert!((m.average_accuracy() - 0.7).abs() <= 1e-12);
    assert_eq!(m.final_accuracy(), 0.6);
}

proptest! {
    #[test]
    fn average_dominates_final_on_non_increasing(mut v in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        v.sort_by(|a, b| b.total_cmp(a));
        let n = v.len();
        let m = RunMetrics::new(v.clone(), vec![None; n], 0.0).unwrap();
        prop_assert!(m.average_accuracy() >= m.final_accuracy() - 1e-15);
        let mean = v.iter().sum::<f64>() / n as f64;
        prop_assert!((m.average_accuracy() - mean).abs() <= 1e-12);
    }
}

#[test]
fn noiseless_text_gives_perfect_zero_shot() {
    let cfg = SynthConfig { text_noise: 0.0, spread: 0.05, shared: 0.0, noise_floor: 0.0, task_shift: 0.0, ..small_synth(8) };
    let bench = synth_stream(&cfg).unwrap();
    let stream = &bench.stream;
    let (_, test) = stream.pools().unwrap();
    let bridge = BridgeState::new(stream.w0.clone());
    let mut bank = PrototypeBank::new(stream.d_o(), stream.d(), 0.9).unwrap().with_lambda(0.0).unwrap();
    for (i, &c) in stream.text.class_ids.iter().enumerate() {
        bank.add_class(c, stream.text.protos.row(i)).unwrap();
    }
    let preds = inference::predict_all(&test, &bridge, &bank, &[], 5, 0.01).unwrap();
    assert_eq!(inference::accuracy(&test, &preds), 1.0);
}

#[test]
fn stage_evaluation_covers_all_seen_classes() {
    let bench = synth_stream(&small_synth(4)).unwrap();
    let stream = &bench.stream;
    let mut p = Pipeline::new(stream.w0.clone(), small_config(Method::Bofa)).unwrap();
    for t in 0..stream.tasks.len() {
        p.step(stream).unwrap();
        let eval = stream.seen_test(t).unwrap();
        let mut expect: Vec<u32> = stream.tasks[..=t].iter().flat_map(|x| x.classes.clone()).collect();
        expect.sort_unstable();
        assert_eq!(eval.classes(), expect);
        assert_eq!(p.bank.classes(), expect);
    }
}

#[test]
fn memory_after_ten_classes() {
    let bench = synth_stream(&forgetting_synth()).unwrap();
    let mut p = Pipeline::new(bench.stream.w0.clone(), forgetting_config(Method::Bofa)).unwrap();
    p.step(&bench.stream).unwrap();
    let r = p.memory_report();
    assert_eq!(r.mean_feat_bytes, 10 * 64 * 8);
    assert_eq!(r.aux_bytes, 10 * 64 * 8);
    assert_eq!(r.scatter_bytes, 64 * 64 * 8);
}

#[test]
fn visual_prototypes_follow_the_bridge() {
    let bench = synth_stream(&small_synth(6)).unwrap();
    let stream = &bench.stream;
    let mut p = Pipeline::new(stream.w0.clone(), small_config(Method::Bofa)).unwrap();
    for _ in 0..stream.tasks.len() {
        p.step(stream).unwrap();
    }
    let w = p.bridge.effective();
    for e in p.bank.entries().values() {
        let z = matmul(&Matrix::row_vector(&e.mean_feat).unwrap(), &w).unwrap();
        let expect = matrixkit::normalize(z.row(0)).unwrap();
        let got = e.visual.as_ref().unwrap();
        assert!(expect.iter().zip(got).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn old_negatives_option_runs() {
    let bench = synth_stream(&small_synth(7)).unwrap();
    let cfg = RunConfig { include_old_negatives: true, ..small_config(Method::Bofa) };
    let m = run_protocol(&bench.stream, &cfg).unwrap();
    assert_eq!(m.stage_accuracies.len(), 4);
}

#[test]
fn zero_learning_rate_keeps_bridge_after_first_task() {
    let bench = synth_stream(&small_synth(9)).unwrap();
    let cfg = RunConfig {
        train: TrainConfig { lr0: 0.0, ..small_config(Method::Bofa).train },
        ..small_config(Method::Bofa)
    };
    let mut p = Pipeline::new(bench.stream.w0.clone(), cfg).unwrap();
    p.step(&bench.stream).unwrap();
    assert_eq!(p.bridge.dw_old().frobenius(), 0.0);
}
