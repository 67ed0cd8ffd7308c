use ccprompt::autodiff::Graph;
use ccprompt::contrastive::PairIndex;
use ccprompt::encoder::{ToyEncoderConfig, Vocabulary};
use ccprompt::prompt::{assemble_prompt_graph, mask_class_logits_graph};
use ccprompt::{Ablation, Ablations, CcPromptModel, ModelConfig};
use ndarray::{Array2, Array3};

fn model(ablations: Ablations, seed: u64) -> CcPromptModel {
    let vocab =
        Vocabulary::from_tokens(["alpha", "beta", "gamma", "delta", "eps"].map(String::from));
    let mut cfg = ModelConfig::new(vec!["x".into(), "y".into(), "z".into(), "w".into()]);
    cfg.toy = ToyEncoderConfig {
        dim: 6,
        hidden: 8,
        layers: 1,
        max_length: 32,
        embedding_std: 0.7,
    };
    cfg.head_hidden = 6;
    cfg.ablations = ablations;
    cfg.seed = seed;
    CcPromptModel::new(cfg, vocab).unwrap()
}

fn tokens(m: &CcPromptModel) -> Vec<usize> {
    m.encode_tokens(&["beta", "alpha", "eps", "gamma"])
}

#[test]
fn prediction_is_deterministic() {
    let m = model(Ablations::none(), 3);
    let t = tokens(&m);
    let a = m.predict(&t).unwrap();
    assert_eq!(a, m.predict(&t).unwrap());
    assert_eq!(a.selection.m(), 3);
    assert_eq!(a, model(Ablations::none(), 3).predict(&t).unwrap());
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let m = model(Ablations::none(), 1);
    let b = m.losses(&tokens(&m), 2).unwrap();
    assert_eq!(b.total, b.l_cls + b.l_s + b.l_con);
}

#[test]
fn no_siamese_never_runs_the_positive_branch() {
    let m = model(Ablations::none().with(Ablation::NoSiamese), 1);
    let mut g = Graph::new();
    let f = m.forward(&mut g, &tokens(&m), Some(1)).unwrap();
    assert!(f.z_plus.is_none() && f.l_s.is_none());
    let b = f.bundle(&g, &m.config().weights);
    assert_eq!(b.l_s, 0.0);
    assert_eq!(b.total, b.l_cls + b.l_con);

    let full = model(Ablations::none(), 1);
    let mut g2 = Graph::new();
    full.forward(&mut g2, &tokens(&full), Some(1)).unwrap();
    assert!(g2.len() > g.len());
}

#[test]
fn no_lcon_drops_only_the_prototype_loss() {
    let m = model(Ablations::none().with(Ablation::NoLcon), 2);
    let b = m.losses(&tokens(&m), 0).unwrap();
    assert_eq!(b.l_con, 0.0);
    assert!(b.l_s != 0.0);
}

#[test]
fn no_conatt_is_plain_prompt_tuning() {
    let mut m = model(Ablations::none().with(Ablation::NoConAtt), 4);
    let t = tokens(&m);
    let p = m.predict(&t).unwrap();
    assert!(p.selection.is_empty());
    let b = m.losses(&t, 3).unwrap();
    assert_eq!((b.l_s, b.l_con), (0.0, 0.0));

    let mut g = Graph::new();
    let store = m.params();
    let backend = m.backend();
    let embedded = backend.embed(&mut g, store, &t).unwrap();
    let template = g.param(store, store.id("template").unwrap());
    let mask = backend
        .embed(&mut g, store, &[m.vocabulary().mask_id()])
        .unwrap();
    let (prompt, layout) = assemble_prompt_graph(
        &mut g,
        embedded,
        None,
        Some(template),
        mask,
        backend.max_length(),
    )
    .unwrap();
    let z = backend
        .encode(&mut g, store, prompt, Some(layout.mask_position()))
        .unwrap()
        .mask
        .unwrap();
    let v = g.param(store, store.id("verbalizer").unwrap());
    let logits = mask_class_logits_graph(&mut g, z, v);
    assert_eq!(g.value(logits).row(0), p.logits);

    let mut bank = m.prototype_bank();
    bank = ccprompt::prototype::PrototypeBank::new(
        bank.prototypes().mapv(|x| x * -3.0 + 1.0),
        Array2::eye(6) * 2.0,
    )
    .unwrap();
    m.set_prototype_bank(&bank).unwrap();
    assert_eq!(m.predict(&t).unwrap(), p);
}

#[test]
fn no_prototypes_scores_against_label_vectors() {
    let m = model(Ablations::none().with(Ablation::NoPrototypes), 5);
    let t = tokens(&m);
    let mut g = Graph::new();
    let f = m.forward(&mut g, &t, None).unwrap();
    let attrs = g.value(f.attributes.unwrap()).clone();
    let scores = g.value(f.scores.unwrap()).clone();
    let v = m.verbalizer();
    let w = m.prototype_bank().similarity_weight().to_owned();
    let index = PairIndex::new(4);
    for (slot, (i, _)) in index.pairs().enumerate() {
        let mut expected = 0.0;
        for a in 0..6 {
            let mut wc = 0.0;
            for b in 0..6 {
                wc += w[[a, b]] * attrs[[slot, b]];
            }
            expected += wc * v.vector(i)[a];
        }
        assert!((scores[[slot, 0]] - expected).abs() < 1e-10);
    }
}

#[test]
fn selection_follows_the_prototype_bank() {
    let mut m = model(Ablations::none(), 6);
    let t = tokens(&m);
    let mut g = Graph::new();
    let f = m.forward(&mut g, &t, None).unwrap();
    let attrs = g.value(f.attributes.unwrap()).clone();
    let index = PairIndex::new(4);
    // Align one prototype with its attribute and zero the rest.
    let target = index.slot(2, 0);
    let mut protos = Array3::zeros((4, 3, 6));
    let (i, j) = index.pair(target);
    protos
        .slice_mut(ndarray::s![i, index.position(i, j), ..])
        .assign(&attrs.row(target));
    m.set_prototype_bank(&ccprompt::prototype::PrototypeBank::new(protos, Array2::eye(6)).unwrap())
        .unwrap();
    let p = m.predict(&t).unwrap();
    let top = &p.selection.selected[0];
    assert_eq!((top.fact, top.counterfact), (2, 0));
}
