//! Trains the full model on a separable synthetic task and prints the loss
//! curve and held-out accuracy.
//!
//! ```sh
//! cargo run --release --example toy_training
//! ```

use ccprompt::data::{generate_synthetic, synthetic_labels, SyntheticSpec};
use ccprompt::encoder::Vocabulary;
use ccprompt::prototype::Denominator;
use ccprompt::trainer::{accuracy, Example, TrainConfig, Trainer};
use ccprompt::{CcPromptModel, ModelConfig};

fn main() -> ccprompt::Result<()> {
    env_logger::init();
    let train = generate_synthetic(&SyntheticSpec::separable(3, 20, 0), "train");
    let test = generate_synthetic(&SyntheticSpec::separable(3, 20, 1), "test");
    let vocab = Vocabulary::build(train.iter().chain(&test).map(|i| i.tokens.as_slice()));

    let mut cfg = ModelConfig::new(synthetic_labels(3).names().to_vec());
    cfg.denominator = Denominator::WithPositive;
    let mut model = CcPromptModel::new(cfg, vocab)?;
    let train_ex = Example::from_instances(&train, model.vocabulary());
    let test_ex = Example::from_instances(&test, model.vocabulary());
    println!(
        "parameters: {}",
        model
            .params()
            .iter()
            .map(|(_, _, v)| v.len())
            .sum::<usize>()
    );
    println!("accuracy before: {:.3}", accuracy(&model, &test_ex, 0)?);

    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 60,
        ..TrainConfig::default()
    };
    let report = Trainer::new(&mut model, config).fit(
        &train_ex,
        &[],
        None::<fn(&CcPromptModel, &[Example]) -> ccprompt::Result<f64>>,
    )?;
    for (epoch, l) in report.epoch_losses.iter().enumerate().step_by(10) {
        println!(
            "epoch {epoch:>3}  l_cls {:.4}  l_s {:+.4}  l_con {:.4}  total {:.4}",
            l.l_cls, l.l_s, l.l_con, l.total
        );
    }
    println!("accuracy after: {:.3}", accuracy(&model, &test_ex, 0)?);
    Ok(())
}
