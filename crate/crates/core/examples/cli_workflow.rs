//! Writes a synthetic dataset and config to a directory, then runs the same
//! train / eval / sample-episodes / analyze steps as the `ccprompt` binary.
//!
//! ```sh
//! cargo run --release --example cli_workflow -- /tmp/ccprompt-demo
//! ```

use std::fs;
use std::path::PathBuf;

use ccprompt::analysis::Mode;
use ccprompt::commands::{self, Overrides};
use ccprompt::data::{generate_synthetic, synthetic_labels, write_jsonl, SyntheticSpec};
use ccprompt::encoder::AdapterRegistry;

const CONFIG: &str = "\
[data]
name = toy3
train = train.jsonl
dev = dev.jsonl
test = test.jsonl
labels = labels.txt

[encoder]
d_e = 16

[prompt]
head_hidden = 16

[loss]
include_positive_in_denominator = true

[train]
learning_rate = 1e-2
epochs = 40
seed = 0

[output]
dir = run
";

fn main() -> ccprompt::Result<()> {
    env_logger::init();
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ccprompt-demo"));
    fs::create_dir_all(&dir).map_err(|e| ccprompt::Error::io(&dir, e))?;

    let labels = synthetic_labels(3);
    for (split, n, seed) in [("train", 20, 1), ("dev", 10, 2), ("test", 20, 3)] {
        let data = generate_synthetic(&SyntheticSpec::separable(3, n, seed), split);
        write_jsonl(&dir.join(format!("{split}.jsonl")), &data, &labels)?;
    }
    fs::write(dir.join("labels.txt"), labels.to_text())
        .map_err(|e| ccprompt::Error::io(&dir, e))?;
    let config = dir.join("toy.ini");
    fs::write(&config, CONFIG).map_err(|e| ccprompt::Error::io(&config, e))?;

    let registry = AdapterRegistry::default();
    let trained = commands::cmd_train(&config, &Overrides::default(), &registry)?;
    let run = &trained.metrics.runs[0];
    println!(
        "trained: config {} | loss {:.3} -> {:.3} | test accuracy {:.3}",
        trained.metrics.config_hash,
        run.initial_loss.l_cls,
        run.final_loss.l_cls,
        run.eval.unwrap_or(f64::NAN)
    );

    let eval = commands::cmd_eval(&trained.checkpoint, "test", &registry)?;
    println!("eval: {}", serde_json::to_string(&eval)?);

    let episodes = commands::cmd_sample_episodes(&config, "train", &[1, 4], &[13, 21], None)?;
    println!("wrote {} episode manifests", episodes.len());

    let report = commands::cmd_analyze(
        &trained.checkpoint,
        "test",
        Mode::Contrastive,
        3,
        &dir.join("run"),
        &registry,
    )?;
    println!("\n{}", report.report);
    Ok(())
}
