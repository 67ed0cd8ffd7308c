use std::collections::HashSet;

use ccprompt::data::{
    generate_synthetic, load_jsonl, parse_jsonl, sample_episode, seed_average, synthetic_labels,
    to_jsonl, LabelSet, LabeledInstance, Metric, Span, SyntheticSpec,
};
use ccprompt::encoder::{ToyEncoderConfig, Vocabulary};
use ccprompt::trainer::{accuracy, Example};
use ccprompt::{CcPromptModel, Error, ModelConfig};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Vec<String>, usize, Vec<(usize, usize, String)>)> {
    (
        prop::collection::vec("[a-zA-Z\"\\\\ é<>]{1,6}", 1..8),
        0usize..3,
    )
        .prop_flat_map(|(tokens, label)| {
            let n = tokens.len();
            let span = (0..=n, 0..=n, "[a-z]{1,4}").prop_map(|(a, b, r)| (a.min(b), a.max(b), r));
            (Just(tokens), Just(label), prop::collection::vec(span, 0..3))
        })
}

proptest! {
    #[test]
    fn jsonl_round_trips(items in prop::collection::vec(instance(), 0..6)) {
        let labels = LabelSet::new(vec!["a".into(), "b b".into(), "c\"".into()], Some(0)).unwrap();
        let data: Vec<LabeledInstance> = items
            .into_iter()
            .enumerate()
            .map(|(i, (tokens, label, spans))| LabeledInstance {
                id: format!("x{i}"),
                tokens,
                label,
                spans: spans.into_iter().map(|(start, end, role)| Span { start, end, role }).collect(),
            })
            .collect();
        let text = to_jsonl(&data, &labels);
        prop_assert_eq!(parse_jsonl(&text, &labels, "mem").unwrap(), data);
    }
}

#[test]
fn one_shot_ten_classes() {
    let labels = synthetic_labels(10);
    let split = generate_synthetic(&SyntheticSpec::separable(10, 5, 4), "train");
    let mut per_seed = Vec::new();
    for seed in [13, 21, 42, 87, 100] {
        let ep = sample_episode(&split, labels.len(), 1, seed, "toy10").unwrap();
        assert_eq!(ep.train_ids.len(), 10);
        assert_eq!(ep.dev_ids.len(), 10);
        let (train, dev) = ep.select(&split);
        let classes: HashSet<usize> = train.iter().map(|i| i.label).collect();
        assert_eq!(classes.len(), 10);
        assert!(dev.iter().all(|d| !ep.train_ids.contains(&d.id)));
        per_seed.push(seed as f64 / 100.0);
    }
    let (mean, std) = seed_average(&per_seed);
    let manual_mean = (0.13 + 0.21 + 0.42 + 0.87 + 1.00) / 5.0;
    let manual_var = [0.13, 0.21, 0.42, 0.87, 1.00]
        .iter()
        .map(|x: &f64| (x - manual_mean) * (x - manual_mean))
        .sum::<f64>()
        / 5.0;
    assert!((mean - manual_mean).abs() < 1e-12);
    assert!((std - manual_var.sqrt()).abs() < 1e-12);
}

#[test]
fn unknown_label_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(
        &path,
        "{\"id\": \"1\", \"tokens\": [\"a\"], \"label\": \"x\"}\n{\"id\": \"2\", \"tokens\": [\"b\"], \"label\": \"zz\"}\n",
    )
    .unwrap();
    let labels = LabelSet::parse("x\ny\n").unwrap();
    match load_jsonl(&path, &labels) {
        Err(e @ Error::UnknownLabel { line: 2, .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected unknown label, got {other:?}"),
    }
}

#[test]
fn perfect_predictions_score_one() {
    let golds = [0, 1, 2, 3, 1, 0];
    for metric in [Metric::Accuracy, Metric::MicroF1] {
        assert_eq!(metric.compute(&golds, &golds, Some(0)).unwrap(), 1.0);
    }
}

#[test]
fn untrained_models_are_near_chance() {
    let data = generate_synthetic(&SyntheticSpec::separable(4, 50, 8), "test");
    let vocab = Vocabulary::build(data.iter().map(|i| i.tokens.as_slice()));
    let examples = Example::from_instances(&data, &vocab);
    let labels: Vec<String> = synthetic_labels(4).names().to_vec();
    let scores: Vec<f64> = [13, 21, 42, 87, 100]
        .iter()
        .map(|&seed| {
            let mut cfg = ModelConfig::new(labels.clone());
            cfg.toy = ToyEncoderConfig {
                dim: 8,
                hidden: 8,
                ..ToyEncoderConfig::default()
            };
            cfg.head_hidden = 8;
            cfg.seed = seed;
            let model = CcPromptModel::new(cfg, vocab.clone()).unwrap();
            accuracy(&model, &examples, 2).unwrap()
        })
        .collect();
    let (mean, _) = seed_average(&scores);
    assert!(
        (mean - 0.25).abs() <= 0.15,
        "mean accuracy {mean}, per seed {scores:?}"
    );
}
