#![allow(dead_code)]

use ccprompt::autodiff::Graph;
use ccprompt::encoder::{ToyEncoderConfig, Vocabulary};
use ccprompt::model::{Forward, TemplateSpec};
use ccprompt::{CcPromptModel, ModelConfig};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Cls,
    Siamese,
    Contrastive,
    Total,
}

impl Term {
    pub fn pick(&self, f: &Forward) -> ccprompt::autodiff::Var {
        match self {
            Term::Cls => f.l_cls,
            Term::Siamese => f.l_s,
            Term::Contrastive => f.l_con,
            Term::Total => f.total,
        }
        .expect("term present")
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a floor: entries where both values are below
/// `1e-7` in magnitude are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Loss with `stop_gradient` targets frozen at `frozen`.
fn eval(
    model: &CcPromptModel,
    tokens: &[usize],
    gold: usize,
    term: Term,
    frozen: &[ndarray::Array2<f64>],
) -> f64 {
    let mut g = Graph::with_frozen_targets(frozen.to_vec());
    let f = model.forward(&mut g, tokens, Some(gold)).unwrap();
    g.scalar(term.pick(&f))
}

/// Compares backprop gradients of one loss term with central differences
/// on every parameter scalar.
pub fn check_gradients(
    model: &mut CcPromptModel,
    tokens: &[usize],
    gold: usize,
    term: Term,
) -> GradReport {
    let mut g = Graph::new();
    let f = model.forward(&mut g, tokens, Some(gold)).unwrap();
    let loss = term.pick(&f);
    let frozen = g.stopped_values().to_vec();
    let grads = g.backward(loss).params();
    let ids: Vec<_> = model.params().ids().collect();
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for id in ids {
        let shape = model.params().get(id).dim();
        let name = model.params().name(id).to_owned();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params().get(id)[[r, c]];
                model.params_mut().get_mut(id)[[r, c]] = orig + FD_STEP;
                let up = eval(model, tokens, gold, term, &frozen);
                model.params_mut().get_mut(id)[[r, c]] = orig - FD_STEP;
                let down = eval(model, tokens, gold, term, &frozen);
                model.params_mut().get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = grads.get(&id).map_or(0.0, |g| g[[r, c]]);
                let e = rel_err(analytic, numeric);
                report.checked += 1;
                if e > report.max_rel {
                    report.max_rel = e;
                    report.worst =
                        format!("{name}[{r},{c}] analytic={analytic:e} numeric={numeric:e}");
                }
            }
        }
    }
    report
}

/// A toy model with fewer than 200 parameters.
pub fn tiny_model(seed: u64) -> (CcPromptModel, Vec<usize>) {
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"].map(String::from));
    let mut cfg = ModelConfig::new(vec!["x".into(), "y".into(), "z".into()]);
    cfg.toy = ToyEncoderConfig {
        dim: 3,
        hidden: 3,
        layers: 1,
        max_length: 16,
        embedding_std: 0.8,
    };
    cfg.head_hidden = 3;
    cfg.template = TemplateSpec::Continuous(1);
    cfg.seed = seed;
    let model = CcPromptModel::new(cfg, vocab).unwrap();
    let tokens = model.encode_tokens(&["a", "c", "b", "d"]);
    (model, tokens)
}
