//! Draws K-shot episodes for several seeds, trains one model per episode
//! with dev-based epoch selection, and reports the seed average.
//!
//! ```sh
//! cargo run --release --example few_shot_episodes
//! ```

use ccprompt::data::{
    generate_synthetic, sample_episode, seed_average, synthetic_labels, LabeledInstance,
    SyntheticSpec,
};
use ccprompt::encoder::Vocabulary;
use ccprompt::prototype::Denominator;
use ccprompt::trainer::{accuracy, Example, TrainConfig, Trainer};
use ccprompt::{CcPromptModel, ModelConfig};

fn main() -> ccprompt::Result<()> {
    let pool = generate_synthetic(&SyntheticSpec::overlapping(3, 40, 100), "pool");
    let test = generate_synthetic(&SyntheticSpec::overlapping(3, 60, 200), "test");
    let vocab = Vocabulary::build(pool.iter().chain(&test).map(|i| i.tokens.as_slice()));
    let labels = synthetic_labels(3);

    for k in [2, 8] {
        let mut scores = Vec::new();
        for seed in [13, 21, 42, 87, 100] {
            let episode = sample_episode(&pool, labels.len(), k, seed, "overlapping")?;
            let (train, dev) = episode.select(&pool);
            let owned = |v: Vec<&LabeledInstance>| v.into_iter().cloned().collect::<Vec<_>>();

            let mut cfg = ModelConfig::new(labels.names().to_vec());
            cfg.denominator = Denominator::WithPositive;
            cfg.seed = seed;
            let mut model = CcPromptModel::new(cfg, vocab.clone())?;
            let train_ex = Example::from_instances(&owned(train), model.vocabulary());
            let dev_ex = Example::from_instances(&owned(dev), model.vocabulary());
            let test_ex = Example::from_instances(&test, model.vocabulary());
            let config = TrainConfig {
                learning_rate: 1e-2,
                epochs: 50,
                seed,
                ..TrainConfig::default()
            };
            let report = Trainer::new(&mut model, config).fit(
                &train_ex,
                &dev_ex,
                Some(|m: &CcPromptModel, d: &[Example]| accuracy(m, d, 0)),
            )?;
            let score = accuracy(&model, &test_ex, 0)?;
            println!(
                "K={k:<2} seed={seed:<3} best epoch {:>2}  dev {:.3}  test {score:.3}",
                report.best_epoch.unwrap_or(0),
                report.best_dev.unwrap_or(f64::NAN)
            );
            scores.push(score);
        }
        let (mean, std) = seed_average(&scores);
        println!("K={k}: test accuracy {mean:.3} ± {std:.3}\n");
    }
    Ok(())
}
