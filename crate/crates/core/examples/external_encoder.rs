//! Plugs a user-defined masked language model into the registry and trains
//! the prompt, heads and adapter projection on top of it while the wrapped
//! model stays frozen.
//!
//! ```sh
//! cargo run --release --example external_encoder
//! ```

use std::sync::Arc;

use ccprompt::data::{generate_synthetic, synthetic_labels, SyntheticSpec};
use ccprompt::encoder::{AdapterRegistry, ExternalMlm, Vocabulary};
use ccprompt::prototype::Denominator;
use ccprompt::trainer::{accuracy, Example, TrainConfig, Trainer};
use ccprompt::{CcPromptModel, EncoderKind, ModelConfig};
use ndarray::{Array1, Array2, Axis};

/// Hashed bag-of-characters embeddings and a running-mean context mix.
struct CharMlm {
    vocab: Vocabulary,
    dim: usize,
}

impl ExternalMlm for CharMlm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_length(&self) -> usize {
        64
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn embed_ids(&self, ids: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (row, &id) in ids.iter().enumerate() {
            for (k, b) in self.vocab.token(id).bytes().enumerate() {
                out[[row, (b as usize * 31 + k) % self.dim]] += 0.5;
            }
        }
        out
    }

    fn hidden_states(&self, embedded: &Array2<f64>) -> Array2<f64> {
        let mean: Array1<f64> = embedded.mean_axis(Axis(0)).unwrap();
        let mut h = embedded.clone();
        for mut row in h.rows_mut() {
            row += &(&mean * 0.5);
        }
        h.mapv(f64::tanh)
    }
}

fn main() -> ccprompt::Result<()> {
    let train = generate_synthetic(&SyntheticSpec::separable(3, 20, 0), "train");
    let test = generate_synthetic(&SyntheticSpec::separable(3, 20, 1), "test");
    let vocab = Vocabulary::build(train.iter().chain(&test).map(|i| i.tokens.as_slice()));

    let mut registry = AdapterRegistry::default();
    registry.register("char-mlm", |opts| {
        Ok(Arc::new(CharMlm {
            vocab: opts.vocabulary.clone(),
            dim: opts.dim,
        }))
    });
    println!(
        "registered adapters: {}",
        registry.names().collect::<Vec<_>>().join(", ")
    );

    for name in ["frozen-random", "char-mlm"] {
        let mut cfg = ModelConfig::new(synthetic_labels(3).names().to_vec());
        cfg.encoder = EncoderKind::External(name.to_owned());
        cfg.denominator = Denominator::WithPositive;
        let mut model = CcPromptModel::with_registry(cfg, vocab.clone(), &registry)?;
        let train_ex = Example::from_instances(&train, model.vocabulary());
        let test_ex = Example::from_instances(&test, model.vocabulary());
        let before = accuracy(&model, &test_ex, 0)?;
        let config = TrainConfig {
            learning_rate: 1e-2,
            epochs: 40,
            ..TrainConfig::default()
        };
        Trainer::new(&mut model, config).fit(
            &train_ex,
            &[],
            None::<fn(&CcPromptModel, &[Example]) -> ccprompt::Result<f64>>,
        )?;
        println!(
            "{name:<14} test accuracy {before:.3} -> {:.3}",
            accuracy(&model, &test_ex, 0)?
        );
    }
    Ok(())
}
