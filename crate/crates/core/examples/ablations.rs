//! Trains the full model and each single-component ablation on the same
//! data and compares test accuracy.
//!
//! ```sh
//! cargo run --release --example ablations
//! ```

use ccprompt::data::{generate_synthetic, synthetic_labels, SyntheticSpec};
use ccprompt::encoder::Vocabulary;
use ccprompt::prototype::Denominator;
use ccprompt::trainer::{accuracy, Example, TrainConfig, Trainer};
use ccprompt::{Ablation, Ablations, CcPromptModel, ModelConfig};

fn main() -> ccprompt::Result<()> {
    let train = generate_synthetic(&SyntheticSpec::overlapping(3, 12, 5), "train");
    let test = generate_synthetic(&SyntheticSpec::overlapping(3, 60, 6), "test");
    let vocab = Vocabulary::build(train.iter().chain(&test).map(|i| i.tokens.as_slice()));

    let variants = [
        Ablations::none(),
        Ablations::none().with(Ablation::NoConAtt),
        Ablations::none().with(Ablation::NoPrototypes),
        Ablations::none().with(Ablation::NoLcon),
        Ablations::none().with(Ablation::NoSiamese),
    ];
    for ablations in variants {
        let name = if ablations.is_empty() {
            "full".to_owned()
        } else {
            ablations.to_string()
        };
        let mut cfg = ModelConfig::new(synthetic_labels(3).names().to_vec());
        cfg.denominator = Denominator::WithPositive;
        cfg.ablations = ablations;
        let mut model = CcPromptModel::new(cfg, vocab.clone())?;
        let train_ex = Example::from_instances(&train, model.vocabulary());
        let test_ex = Example::from_instances(&test, model.vocabulary());
        let config = TrainConfig {
            learning_rate: 1e-2,
            epochs: 40,
            ..TrainConfig::default()
        };
        let report = Trainer::new(&mut model, config).fit(
            &train_ex,
            &[],
            None::<fn(&CcPromptModel, &[Example]) -> ccprompt::Result<f64>>,
        )?;
        let last = report.epoch_losses.last().copied().unwrap_or_default();
        println!(
            "{name:<14} test accuracy {:.3}  final l_cls {:.4}  l_s {:+.4}  l_con {:.4}",
            accuracy(&model, &test_ex, 0)?,
            last.l_cls,
            last.l_s,
            last.l_con
        );
    }
    Ok(())
}
