//! The train / eval / sample-episodes / analyze workflows behind the
//! command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, CaseStudy, FrequencyTable, Mode, PredictionRecord, ReportFormat};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{config_hash, RunConfig};
use crate::data::{self, FewShotEpisode, LabelSet, LabeledInstance, Metric};
use crate::encoder::{AdapterRegistry, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::model::{Ablations, CcPromptModel};
use crate::trainer::{self, Example, FitReport, TrainConfig, Trainer};

/// Command-line values layered over a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub k: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub ablations: Option<Ablations>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.k.is_none() && self.seeds.is_none() && self.ablations.is_none()
    }

    /// Applies the overrides and rehashes the config so that outputs of an
    /// overridden run never share a hash with the plain one.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let mut note = String::from("\n# overrides:");
        if let Some(k) = self.k {
            if k == 0 {
                return Err(Error::config("K", "K must be at least 1"));
            }
            let seeds = cfg
                .fewshot
                .as_ref()
                .map_or(crate::config::DEFAULT_SEEDS.to_vec(), |f| f.seeds.clone());
            cfg.fewshot = Some(crate::config::FewShotConfig { k, seeds });
            if cfg.train.epochs == TrainConfig::fully_supervised().epochs {
                cfg.train.epochs = TrainConfig::few_shot().epochs;
            }
            note.push_str(&format!(" K={k}"));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(Error::config("seeds", "empty seed list"));
            }
            match cfg.fewshot.as_mut() {
                Some(f) => f.seeds = seeds.clone(),
                None => cfg.train.seed = seeds[0],
            }
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            note.push_str(&format!(" seeds={}", list.join(",")));
        }
        if let Some(a) = &self.ablations {
            for x in a.iter() {
                cfg.ablations.insert(x);
            }
            note.push_str(&format!(" ablation={a}"));
        }
        cfg.hash = config_hash(&format!("{}{note}", cfg.source));
        Ok(())
    }
}

/// Loaded splits with their shared label set.
#[derive(Debug, Clone)]
pub struct Splits {
    pub labels: LabelSet,
    pub train: Vec<LabeledInstance>,
    pub dev: Option<Vec<LabeledInstance>>,
    pub test: Option<Vec<LabeledInstance>>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let labels = match &d.labels {
        Some(p) => LabelSet::load(p)?,
        None => {
            let paths: Vec<&Path> = std::iter::once(d.train.as_path())
                .chain(d.dev.as_deref())
                .chain(d.test.as_deref())
                .collect();
            data::infer_labels(&paths)?
        }
    };
    if labels.len() < 2 {
        return Err(Error::config("data.labels", "need at least two classes"));
    }
    let load = |p: &Option<PathBuf>| p.as_ref().map(|p| data::load_jsonl(p, &labels)).transpose();
    Ok(Splits {
        train: data::load_jsonl(&d.train, &labels)?,
        dev: load(&d.dev)?,
        test: load(&d.test)?,
        labels,
    })
}

/// Mean of each loss term over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_cls: f64,
    pub l_s: f64,
    pub l_con: f64,
    pub total: f64,
}

impl From<LossBundle> for LossSummary {
    fn from(b: LossBundle) -> Self {
        Self {
            l_cls: b.l_cls,
            l_s: b.l_s,
            l_con: b.l_con,
            total: b.total,
        }
    }
}

pub fn mean_losses(model: &CcPromptModel, data: &[Example]) -> Result<LossSummary> {
    let mut acc = LossSummary {
        l_cls: 0.0,
        l_s: 0.0,
        l_con: 0.0,
        total: 0.0,
    };
    for ex in data {
        let b = model.losses(&ex.tokens, ex.label)?;
        acc.l_cls += b.l_cls;
        acc.l_s += b.l_s;
        acc.l_con += b.l_con;
        acc.total += b.total;
    }
    let n = data.len().max(1) as f64;
    Ok(LossSummary {
        l_cls: acc.l_cls / n,
        l_s: acc.l_s / n,
        l_con: acc.l_con / n,
        total: acc.total / n,
    })
}

/// Scores a model on examples with the configured metric.
pub fn score(
    model: &CcPromptModel,
    data: &[Example],
    metric: Metric,
    negative: Option<usize>,
    threads: usize,
) -> Result<f64> {
    let preds = trainer::predict_all(model, data, threads)?;
    let golds: Vec<usize> = data.iter().map(|e| e.label).collect();
    metric.compute(&preds, &golds, negative)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub dev: Option<f64>,
    pub eval: Option<f64>,
    pub initial_loss: LossSummary,
    pub final_loss: LossSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    pub learning_rate: f64,
    pub dev_mean: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub config_hash: String,
    pub dataset: String,
    pub metric: String,
    pub ablations: String,
    pub k: Option<usize>,
    pub learning_rate: f64,
    pub lr_search: Vec<LrResult>,
    pub eval_split: Option<String>,
    pub runs: Vec<SeedRun>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub log_path: PathBuf,
    pub predictions_path: PathBuf,
    pub metrics: TrainMetrics,
}

struct Trained {
    model: CcPromptModel,
    report: FitReport,
    initial: LossSummary,
    log: Vec<u8>,
}

struct Job<'a> {
    cfg: &'a RunConfig,
    labels: &'a LabelSet,
    vocab: &'a Vocabulary,
    registry: &'a AdapterRegistry,
}

impl Job<'_> {
    fn run(&self, train: &[Example], dev: &[Example], lr: f64, seed: u64) -> Result<Trained> {
        let mc = self.cfg.model_config(self.labels.names().to_vec(), seed);
        let mut model = CcPromptModel::with_registry(mc, self.vocab.clone(), self.registry)?;
        let initial = mean_losses(&model, train)?;
        let tc = TrainConfig {
            learning_rate: lr,
            seed,
            ..self.cfg.train.clone()
        };
        let threads = tc.threads;
        let metric = self.cfg.data.metric;
        let negative = self.labels.negative();
        let mut log = Vec::new();
        let report = {
            let mut t = Trainer::new(&mut model, tc).with_log(&mut log);
            t.fit(
                train,
                dev,
                Some(|m: &CcPromptModel, d: &[Example]| score(m, d, metric, negative, threads)),
            )?
        };
        Ok(Trained {
            model,
            report,
            initial,
            log,
        })
    }
}

fn examples(data: &[&LabeledInstance], vocab: &Vocabulary) -> Vec<Example> {
    let owned: Vec<LabeledInstance> = data.iter().map(|i| (*i).clone()).collect();
    Example::from_instances(&owned, vocab)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn base_meta(cfg: &RunConfig, labels: &LabelSet) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".into(), cfg.hash.clone());
    meta.insert("dataset".into(), cfg.data.name.clone());
    meta.insert("metric".into(), cfg.data.metric.name().into());
    meta.insert(
        "negative".into(),
        labels.negative().map_or("none".into(), |n| n.to_string()),
    );
    let dir = fs::canonicalize(&cfg.base).unwrap_or_else(|_| cfg.base.clone());
    meta.insert("config_dir".into(), dir.display().to_string());
    meta
}

/// Trains over the learning-rate grid and every seed, keeps the rate with
/// the best mean dev score, and writes `model.ckpt`, `metrics.log`,
/// `metrics.json` and `predictions.jsonl` under the output directory.
pub fn cmd_train(
    config_path: &Path,
    overrides: &Overrides,
    registry: &AdapterRegistry,
) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    train_with(&cfg, registry)
}

pub fn train_with(cfg: &RunConfig, registry: &AdapterRegistry) -> Result<TrainOutcome> {
    let splits = load_splits(cfg)?;
    let vocab = Vocabulary::build(splits.train.iter().map(|i| i.tokens.as_slice()));
    let job = Job {
        cfg,
        labels: &splits.labels,
        vocab: &vocab,
        registry,
    };

    let seeds: Vec<u64> = match &cfg.fewshot {
        Some(f) => f.seeds.clone(),
        None => vec![cfg.train.seed],
    };
    let mut per_seed_data = Vec::new();
    for &seed in &seeds {
        let (train, dev) = match &cfg.fewshot {
            Some(f) => {
                let ep = data::sample_episode(
                    &splits.train,
                    splits.labels.len(),
                    f.k,
                    seed,
                    &cfg.data.name,
                )?;
                let (tr, dv) = ep.select(&splits.train);
                (examples(&tr, &vocab), examples(&dv, &vocab))
            }
            None => (
                Example::from_instances(&splits.train, &vocab),
                splits
                    .dev
                    .as_deref()
                    .map_or(Vec::new(), |d| Example::from_instances(d, &vocab)),
            ),
        };
        per_seed_data.push((train, dev));
    }
    let (eval_name, eval_split) = match (&splits.test, &splits.dev) {
        (Some(t), _) => (Some("test"), Some(t)),
        (None, Some(d)) if cfg.fewshot.is_some() => (Some("dev"), Some(d)),
        _ => (None, None),
    };
    let eval_examples = eval_split.map(|d| Example::from_instances(d, &vocab));

    let mut log_text = String::new();
    let mut lr_search = Vec::new();
    let mut best: Option<(f64, Option<f64>, Vec<Trained>)> = None;
    for &lr in &cfg.learning_rates {
        let mut runs = Vec::new();
        for (&seed, (train, dev)) in seeds.iter().zip(&per_seed_data) {
            log::info!("training lr={lr:e} seed={seed} on {} examples", train.len());
            let run = job.run(train, dev, lr, seed)?;
            log_text.push_str(&format!(
                "# config_hash={} lr={lr:e} seed={seed}\n",
                cfg.hash
            ));
            log_text.push_str(&String::from_utf8_lossy(&run.log));
            runs.push(run);
        }
        let devs: Vec<f64> = runs.iter().filter_map(|r| r.report.best_dev).collect();
        let dev_mean =
            (devs.len() == runs.len() && !devs.is_empty()).then(|| data::seed_average(&devs).0);
        lr_search.push(LrResult {
            learning_rate: lr,
            dev_mean,
        });
        let better = match &best {
            None => true,
            Some((_, b, _)) => matches!((dev_mean, b), (Some(x), Some(y)) if x > *y),
        };
        if better {
            best = Some((lr, dev_mean, runs));
        }
    }
    let (lr, _, runs) = best.ok_or_else(|| Error::config("train.learning_rate", "empty grid"))?;

    let metric = cfg.data.metric;
    let negative = splits.labels.negative();
    let mut seed_runs = Vec::new();
    for ((run, &seed), (train, _)) in runs.iter().zip(&seeds).zip(&per_seed_data) {
        let eval = eval_examples
            .as_deref()
            .map(|e| score(&run.model, e, metric, negative, cfg.train.threads))
            .transpose()?;
        seed_runs.push(SeedRun {
            seed,
            best_epoch: run.report.best_epoch,
            dev: run.report.best_dev,
            eval,
            initial_loss: run.initial,
            final_loss: mean_losses(&run.model, train)?,
        });
    }
    let evals: Vec<f64> = seed_runs.iter().filter_map(|r| r.eval).collect();
    let (eval_mean, eval_std) = if evals.is_empty() {
        (None, None)
    } else {
        let (m, s) = data::seed_average(&evals);
        (Some(m), Some(s))
    };
    let metrics = TrainMetrics {
        config_hash: cfg.hash.clone(),
        dataset: cfg.data.name.clone(),
        metric: metric.name().into(),
        ablations: cfg.ablations.to_string(),
        k: cfg.fewshot.as_ref().map(|f| f.k),
        learning_rate: lr,
        lr_search,
        eval_split: eval_name.map(str::to_owned),
        runs: seed_runs,
        eval_mean,
        eval_std,
    };

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut meta = base_meta(cfg, &splits.labels);
    meta.insert("learning_rate".into(), format!("{lr:e}"));
    let mut extra = BTreeMap::new();
    extra.insert("config".to_owned(), cfg.source.clone().into_bytes());
    for (i, (run, seed)) in runs.iter().zip(&seeds).enumerate() {
        meta.insert("seed".into(), seed.to_string());
        let path = if i == 0 {
            out.join("model.ckpt")
        } else {
            out.join(format!("model-seed{seed}.ckpt"))
        };
        checkpoint::save(&path, &run.model, &meta, &extra)?;
    }

    let main = &runs[0].model;
    let (pred_data, pred_examples) = match eval_split {
        Some(d) => (d.as_slice(), eval_examples.clone().unwrap_or_default()),
        None => (
            splits.train.as_slice(),
            Example::from_instances(&splits.train, &vocab),
        ),
    };
    let records = prediction_records(main, pred_data, &pred_examples, cfg.train.threads)?;

    let outcome = TrainOutcome {
        checkpoint: out.join("model.ckpt"),
        metrics_path: out.join("metrics.json"),
        log_path: out.join("metrics.log"),
        predictions_path: out.join("predictions.jsonl"),
        metrics,
    };
    write(&outcome.log_path, log_text)?;
    write(
        &outcome.metrics_path,
        serde_json::to_string_pretty(&outcome.metrics)? + "\n",
    )?;
    analysis::write_records(&outcome.predictions_path, &records)?;
    Ok(outcome)
}

fn prediction_records(
    model: &CcPromptModel,
    data: &[LabeledInstance],
    examples: &[Example],
    threads: usize,
) -> Result<Vec<PredictionRecord>> {
    let preds = trainer::predictions(model, examples, threads)?;
    Ok(data
        .iter()
        .zip(&preds)
        .map(|(inst, p)| PredictionRecord::new(inst.id.clone(), inst.label, p))
        .collect())
}

/// A checkpoint together with the context needed to read its splits.
#[derive(Debug)]
pub struct LoadedRun {
    pub checkpoint: Checkpoint,
    pub labels: LabelSet,
    pub metric: Metric,
    pub config: Option<RunConfig>,
}

pub fn load_run(path: &Path, registry: &AdapterRegistry) -> Result<LoadedRun> {
    let checkpoint = checkpoint::load(path, registry)?;
    let negative = match checkpoint.meta.get("negative").map(String::as_str) {
        None | Some("none") => None,
        Some(n) => Some(
            n.parse()
                .map_err(|_| Error::Checkpoint(format!("bad negative index {n:?}")))?,
        ),
    };
    let labels = LabelSet::new(checkpoint.model.labels().to_vec(), negative)?;
    let metric = match checkpoint.meta.get("metric") {
        Some(m) => Metric::parse(m)?,
        None => Metric::Accuracy,
    };
    let config = match (
        checkpoint.blobs.get("config"),
        checkpoint.meta.get("config_dir"),
    ) {
        (Some(text), Some(dir)) => {
            let text = String::from_utf8(text.clone())
                .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
            RunConfig::parse(&text, Path::new(dir)).ok()
        }
        _ => None,
    };
    Ok(LoadedRun {
        checkpoint,
        labels,
        metric,
        config,
    })
}

impl LoadedRun {
    pub fn config_hash(&self) -> &str {
        self.checkpoint
            .meta
            .get("config_hash")
            .map_or("unknown", String::as_str)
    }

    /// Resolves `train`, `dev` or `test` through the stored config; any
    /// other value is read as a JSONL path.
    pub fn split_path(&self, split: &str) -> Result<PathBuf> {
        if matches!(split, "train" | "dev" | "test") {
            let cfg = self.config.as_ref().ok_or_else(|| {
                Error::config("split", "checkpoint has no usable config; pass a file path")
            })?;
            let p = match split {
                "train" => Some(cfg.data.train.clone()),
                "dev" => cfg.data.dev.clone(),
                _ => cfg.data.test.clone(),
            };
            return p.ok_or_else(|| Error::config(format!("data.{split}"), "split not configured"));
        }
        let p = PathBuf::from(split);
        if !p.exists() {
            return Err(Error::config(
                "split",
                format!("{split:?} is neither a split name nor a file"),
            ));
        }
        Ok(p)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<LabeledInstance>> {
        data::load_jsonl(&self.split_path(split)?, &self.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub config_hash: String,
    pub split: String,
    pub instances: usize,
    pub metric: String,
    pub score: f64,
    pub accuracy: f64,
}

pub fn cmd_eval(checkpoint: &Path, split: &str, registry: &AdapterRegistry) -> Result<EvalMetrics> {
    let run = load_run(checkpoint, registry)?;
    let data = run.load_split(split)?;
    evaluate(&run, &data, split)
}

pub fn evaluate(run: &LoadedRun, data: &[LabeledInstance], split: &str) -> Result<EvalMetrics> {
    let model = &run.checkpoint.model;
    let ex = Example::from_instances(data, model.vocabulary());
    let preds = trainer::predict_all(model, &ex, 0)?;
    let golds: Vec<usize> = ex.iter().map(|e| e.label).collect();
    Ok(EvalMetrics {
        config_hash: run.config_hash().to_owned(),
        split: split.to_owned(),
        instances: data.len(),
        metric: run.metric.name().to_owned(),
        score: run.metric.compute(&preds, &golds, run.labels.negative())?,
        accuracy: data::accuracy(&preds, &golds)?,
    })
}

/// An episode file as written by `sample-episodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub config_hash: String,
    pub split: String,
    pub episode: FewShotEpisode,
}

/// Writes `episode-k{K}-seed{seed}.json` for every `(K, seed)` pair.
pub fn cmd_sample_episodes(
    config_path: &Path,
    split: &str,
    ks: &[usize],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(config_path)?;
    let splits = load_splits(&cfg)?;
    let data = match split {
        "train" => &splits.train,
        "dev" => splits
            .dev
            .as_ref()
            .ok_or_else(|| Error::config("data.dev", "split not configured"))?,
        "test" => splits
            .test
            .as_ref()
            .ok_or_else(|| Error::config("data.test", "split not configured"))?,
        other => return Err(Error::config("split", format!("unknown split {other:?}"))),
    };
    let dir = out_dir.map_or_else(|| cfg.output_dir.join("episodes"), Path::to_path_buf);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for &k in ks {
        for &seed in seeds {
            let episode = data::sample_episode(data, splits.labels.len(), k, seed, &cfg.data.name)?;
            let manifest = EpisodeManifest {
                config_hash: cfg.hash.clone(),
                split: split.to_owned(),
                episode,
            };
            let path = dir.join(format!("episode-k{k}-seed{seed}.json"));
            write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutcome {
    pub markdown: PathBuf,
    pub html: PathBuf,
    pub records: PathBuf,
    pub table: FrequencyTable,
    pub report: String,
}

/// Predicts a split, tallies selected counterfacts over correct
/// predictions, and highlights the first `cases` correct instances.
pub fn cmd_analyze(
    checkpoint: &Path,
    split: &str,
    mode: Mode,
    cases: usize,
    out_dir: &Path,
    registry: &AdapterRegistry,
) -> Result<AnalyzeOutcome> {
    let run = load_run(checkpoint, registry)?;
    let data = run.load_split(split)?;
    let model = &run.checkpoint.model;
    let ex = Example::from_instances(&data, model.vocabulary());
    let preds = trainer::predictions(model, &ex, 0)?;
    let records: Vec<PredictionRecord> = data
        .iter()
        .zip(&preds)
        .map(|(inst, p)| PredictionRecord::new(inst.id.clone(), inst.label, p))
        .collect();
    let table = analysis::counterfact_frequency(&records, true)?;

    let verbalizer = model.verbalizer();
    let mut studies = Vec::new();
    for ((inst, e), p) in data.iter().zip(&ex).zip(&preds) {
        if studies.len() >= cases {
            break;
        }
        if p.class != inst.label {
            continue;
        }
        let states = model.token_states(&e.tokens)?;
        let n = states.nrows().min(inst.tokens.len());
        let (dir, counterfact) = analysis::direction(mode, verbalizer.vectors(), p);
        let tokens = analysis::highlight_tokens(
            &inst.tokens[..n],
            states.slice(ndarray::s![..n, ..]),
            dir.view(),
            analysis::DEFAULT_THRESHOLD_FACTOR,
        )?;
        studies.push(CaseStudy {
            id: inst.id.clone(),
            gold: run.labels.name(inst.label).to_owned(),
            predicted: run.labels.name(p.class).to_owned(),
            counterfact: counterfact.map(|c| run.labels.name(c).to_owned()),
            tokens,
        });
    }

    let correct = records.iter().filter(|r| r.is_correct()).count();
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_owned(), run.config_hash().to_owned());
    meta.insert("split".to_owned(), split.to_owned());
    meta.insert("mode".to_owned(), mode.to_string());
    meta.insert("instances".to_owned(), records.len().to_string());
    meta.insert("correct".to_owned(), correct.to_string());
    let names = run.labels.names();
    let report = analysis::render_report(&studies, &table, names, &meta, ReportFormat::Markdown);
    let html = analysis::render_report(&studies, &table, names, &meta, ReportFormat::Html);

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome = AnalyzeOutcome {
        markdown: out_dir.join(format!(
            "report-{split_name}-{mode}.md",
            split_name = file_tag(split)
        )),
        html: out_dir.join(format!("report-{}-{mode}.html", file_tag(split))),
        records: out_dir.join(format!("predictions-{}.jsonl", file_tag(split))),
        table,
        report,
    };
    write(&outcome.markdown, &outcome.report)?;
    write(&outcome.html, html)?;
    analysis::write_records(&outcome.records, &records)?;
    Ok(outcome)
}

fn file_tag(split: &str) -> String {
    Path::new(split)
        .file_stem()
        .map_or_else(|| "split".into(), |s| s.to_string_lossy().into_owned())
}
