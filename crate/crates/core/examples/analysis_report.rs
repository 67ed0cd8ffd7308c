//! Trains a small model, tallies the selected counterfacts of correct
//! predictions and writes a highlighted report in both formats.
//!
//! ```sh
//! cargo run --release --example analysis_report -- /tmp/report
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use ccprompt::analysis::{
    counterfact_frequency, direction, highlight_tokens, render_report, CaseStudy, Mode,
    PredictionRecord, ReportFormat, DEFAULT_THRESHOLD_FACTOR,
};
use ccprompt::data::{generate_synthetic, synthetic_labels, SyntheticSpec};
use ccprompt::encoder::Vocabulary;
use ccprompt::prototype::Denominator;
use ccprompt::trainer::{Example, TrainConfig, Trainer};
use ccprompt::{CcPromptModel, Error, ModelConfig};

fn main() -> ccprompt::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ccprompt-report"));
    let train = generate_synthetic(&SyntheticSpec::separable(3, 20, 0), "train");
    let test = generate_synthetic(&SyntheticSpec::separable(3, 10, 1), "test");
    let vocab = Vocabulary::build(train.iter().chain(&test).map(|i| i.tokens.as_slice()));
    let labels = synthetic_labels(3);

    let mut cfg = ModelConfig::new(labels.names().to_vec());
    cfg.denominator = Denominator::WithPositive;
    let mut model = CcPromptModel::new(cfg, vocab)?;
    let train_ex = Example::from_instances(&train, model.vocabulary());
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 60,
        ..TrainConfig::default()
    };
    Trainer::new(&mut model, config).fit(
        &train_ex,
        &[],
        None::<fn(&CcPromptModel, &[Example]) -> ccprompt::Result<f64>>,
    )?;

    let verbalizer = model.verbalizer();
    let mut records = Vec::new();
    let mut cases = Vec::new();
    for inst in &test {
        let tokens = model.encode_tokens(&inst.tokens);
        let p = model.predict(&tokens)?;
        records.push(PredictionRecord::new(inst.id.clone(), inst.label, &p));
        if p.class == inst.label && cases.len() < 4 {
            let states = model.token_states(&tokens)?;
            let (dir, counterfact) = direction(Mode::Contrastive, verbalizer.vectors(), &p);
            cases.push(CaseStudy {
                id: inst.id.clone(),
                gold: labels.name(inst.label).to_owned(),
                predicted: labels.name(p.class).to_owned(),
                counterfact: counterfact.map(|c| labels.name(c).to_owned()),
                tokens: highlight_tokens(
                    &inst.tokens,
                    states.view(),
                    dir.view(),
                    DEFAULT_THRESHOLD_FACTOR,
                )?,
            });
        }
    }
    let table = counterfact_frequency(&records, true)?;
    let mut meta = BTreeMap::new();
    meta.insert("instances".to_owned(), records.len().to_string());
    meta.insert("mode".to_owned(), Mode::Contrastive.to_string());

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (format, file) in [
        (ReportFormat::Markdown, "report.md"),
        (ReportFormat::Html, "report.html"),
    ] {
        let path = out.join(file);
        let text = render_report(&cases, &table, labels.names(), &meta, format);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    for row in &table.rows {
        println!(
            "{}: most often contrasted with {} ({} of {})",
            labels.name(row.fact),
            labels.name(row.counterfact),
            row.count,
            row.total
        );
    }
    Ok(())
}
