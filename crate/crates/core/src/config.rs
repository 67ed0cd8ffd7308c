//! Run configuration in INI form.
//!
//! ```ini
//! [data]
//! train = data/train.jsonl
//! dev = data/dev.jsonl
//! test = data/test.jsonl
//! labels = data/labels.txt
//! metric = micro_f1
//!
//! [encoder]
//! kind = toy
//! d_e = 16
//!
//! [train]
//! learning_rate = 1e-5, 3e-5, 5e-5
//! epochs = 30
//!
//! [fewshot]
//! k = 8
//! ```
//!
//! Relative paths resolve against the directory of the config file. Every
//! key is optional except `data.train`; unknown sections and keys are
//! rejected.

use std::path::{Path, PathBuf};

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::data::Metric;
use crate::encoder::ToyEncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Ablations, EncoderKind, ModelConfig, TemplateSpec};
use crate::prototype::Denominator;
use crate::trainer::TrainConfig;

const KEYS: &[(&str, &[&str])] = &[
    (
        "data",
        &["name", "train", "dev", "test", "labels", "metric"],
    ),
    (
        "encoder",
        &[
            "kind",
            "d_e",
            "d_hidden",
            "layers",
            "max_length",
            "embedding_std",
            "share_encoder",
        ],
    ),
    (
        "prompt",
        &["template_tokens", "template_text", "m", "head_hidden"],
    ),
    (
        "loss",
        &["include_positive_in_denominator", "w_cls", "w_s", "w_con"],
    ),
    (
        "train",
        &[
            "learning_rate",
            "weight_decay",
            "batch_size",
            "epochs",
            "seed",
            "grad_clip",
            "ablation",
            "threads",
        ],
    ),
    ("fewshot", &["k", "seeds"]),
    ("output", &["dir"]),
];

pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub name: String,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotConfig {
    pub k: usize,
    pub seeds: Vec<u64>,
}

/// Everything a training run needs, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderKind,
    pub toy: ToyEncoderConfig,
    pub share_encoder: bool,
    pub template: TemplateSpec,
    pub m: Option<usize>,
    pub head_hidden: usize,
    pub denominator: Denominator,
    pub weights: LossWeights,
    pub learning_rates: Vec<f64>,
    pub train: TrainConfig,
    pub ablations: Ablations,
    pub fewshot: Option<FewShotConfig>,
    pub output_dir: PathBuf,
    /// First 16 hex digits of the SHA-256 of the config text.
    pub hash: String,
    /// Verbatim config text.
    pub source: String,
    /// Directory that relative paths resolve against.
    pub base: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(k, "key outside of any section"));
                }
                continue;
            };
            let allowed = KEYS
                .iter()
                .find(|(s, _)| *s == section)
                .ok_or_else(|| Error::config(section, "unknown section"))?
                .1;
            for (k, _) in props.iter() {
                if !allowed.contains(&k) {
                    return Err(Error::config(format!("{section}.{k}"), "unknown key"));
                }
            }
        }
        let get = |section: &str, key: &str| -> Option<String> {
            ini.section(Some(section))
                .and_then(|s| s.get(key))
                .map(|v| v.trim().to_owned())
                .filter(|v| !v.is_empty())
        };
        let path = |section: &str, key: &str| get(section, key).map(|p| base.join(p));

        let train_path = path("data", "train")
            .ok_or_else(|| Error::config("data.train", "missing dataset path"))?;
        if !train_path.exists() {
            return Err(Error::config(
                "data.train",
                format!("{} does not exist", train_path.display()),
            ));
        }
        let data = DataConfig {
            name: get("data", "name").unwrap_or_else(|| {
                train_path
                    .file_stem()
                    .map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
            }),
            train: train_path,
            dev: path("data", "dev"),
            test: path("data", "test"),
            labels: path("data", "labels"),
            metric: get("data", "metric")
                .map(|m| Metric::parse(&m))
                .transpose()?
                .unwrap_or(Metric::Accuracy),
        };

        let defaults = ToyEncoderConfig::default();
        let toy = ToyEncoderConfig {
            dim: num(&get, "encoder", "d_e")?.unwrap_or(defaults.dim),
            hidden: num(&get, "encoder", "d_hidden")?.unwrap_or(defaults.hidden),
            layers: num(&get, "encoder", "layers")?.unwrap_or(defaults.layers),
            max_length: num(&get, "encoder", "max_length")?.unwrap_or(defaults.max_length),
            embedding_std: num(&get, "encoder", "embedding_std")?.unwrap_or(defaults.embedding_std),
        };
        if toy.dim == 0 {
            return Err(Error::config("encoder.d_e", "must be positive"));
        }
        let encoder = match get("encoder", "kind") {
            Some(k) => k.parse()?,
            None => EncoderKind::Toy,
        };

        let template = match (
            get("prompt", "template_text"),
            num(&get, "prompt", "template_tokens")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "prompt.template_text",
                    "set either template_text or template_tokens",
                ))
            }
            (Some(text), None) => TemplateSpec::Discrete(crate::encoder::tokenize(&text)),
            (None, Some(n)) => TemplateSpec::Continuous(n),
            (None, None) => TemplateSpec::default(),
        };

        let include_positive =
            flag(&get, "loss", "include_positive_in_denominator")?.unwrap_or(false);
        let w = LossWeights::default();
        let weights = LossWeights {
            cls: num(&get, "loss", "w_cls")?.unwrap_or(w.cls),
            siamese: num(&get, "loss", "w_s")?.unwrap_or(w.siamese),
            contrastive: num(&get, "loss", "w_con")?.unwrap_or(w.contrastive),
        };

        let learning_rates = match get("train", "learning_rate") {
            Some(list) => list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| *x > 0.0 && x.is_finite())
                        .ok_or_else(|| {
                            Error::config("train.learning_rate", format!("bad value {v:?}"))
                        })
                })
                .collect::<Result<Vec<_>>>()?,
            None => TrainConfig::LEARNING_RATE_GRID.to_vec(),
        };

        let fewshot = match num::<usize>(&get, "fewshot", "k")? {
            Some(0) => return Err(Error::config("fewshot.k", "K must be at least 1")),
            Some(k) => Some(FewShotConfig {
                k,
                seeds: match get("fewshot", "seeds") {
                    Some(s) => parse_seeds(&s)
                        .map_err(|_| Error::config("fewshot.seeds", format!("bad list {s:?}")))?,
                    None => DEFAULT_SEEDS.to_vec(),
                },
            }),
            None => None,
        };
        let td = if fewshot.is_some() {
            TrainConfig::few_shot()
        } else {
            TrainConfig::fully_supervised()
        };
        let train = TrainConfig {
            learning_rate: learning_rates[0],
            weight_decay: num(&get, "train", "weight_decay")?.unwrap_or(td.weight_decay),
            batch_size: num(&get, "train", "batch_size")?.unwrap_or(td.batch_size),
            epochs: num(&get, "train", "epochs")?.unwrap_or(td.epochs),
            seed: num(&get, "train", "seed")?.unwrap_or(td.seed),
            grad_clip: num(&get, "train", "grad_clip")?,
            threads: num(&get, "train", "threads")?.unwrap_or(td.threads),
        };
        if train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let ablations = Ablations::parse_list(&get("train", "ablation").unwrap_or_default())
            .map_err(|e| Error::config("train.ablation", e.to_string()))?;

        Ok(Self {
            data,
            encoder,
            toy,
            share_encoder: flag(&get, "encoder", "share_encoder")?.unwrap_or(true),
            template,
            m: num(&get, "prompt", "m")?,
            head_hidden: num(&get, "prompt", "head_hidden")?.unwrap_or(32),
            denominator: if include_positive {
                Denominator::WithPositive
            } else {
                Denominator::NegativesOnly
            },
            weights,
            learning_rates,
            train,
            ablations,
            fewshot,
            output_dir: path("output", "dir").unwrap_or_else(|| base.join("runs")),
            hash: config_hash(text),
            source: text.to_owned(),
            base: base.to_path_buf(),
        })
    }

    /// Model settings for a label set and seed.
    pub fn model_config(&self, labels: Vec<String>, seed: u64) -> ModelConfig {
        ModelConfig {
            labels,
            encoder: self.encoder.clone(),
            toy: self.toy.clone(),
            head_hidden: self.head_hidden,
            template: self.template.clone(),
            m: self.m,
            share_encoder: self.share_encoder,
            denominator: self.denominator,
            weights: self.weights,
            ablations: self.ablations.clone(),
            seed,
        }
    }
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(digest)[..16].to_owned()
}

/// Parses a comma-separated seed list.
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, std::num::ParseIntError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

fn num<T: std::str::FromStr>(
    get: &impl Fn(&str, &str) -> Option<String>,
    section: &str,
    key: &str,
) -> Result<Option<T>> {
    get(section, key)
        .map(|v| {
            v.parse::<T>().map_err(|_| {
                Error::config(format!("{section}.{key}"), format!("cannot parse {v:?}"))
            })
        })
        .transpose()
}

fn flag(
    get: &impl Fn(&str, &str) -> Option<String>,
    section: &str,
    key: &str,
) -> Result<Option<bool>> {
    get(section, key)
        .map(|v| match v.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            _ => Err(Error::config(
                format!("{section}.{key}"),
                format!("not a boolean: {v:?}"),
            )),
        })
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with_train() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.jsonl"), "").unwrap();
        dir
    }

    #[test]
    fn defaults_follow_training_regime() {
        let dir = dir_with_train();
        let full = RunConfig::parse("[data]\ntrain = train.jsonl\n", dir.path()).unwrap();
        assert_eq!(full.train.epochs, 5);
        assert_eq!(full.train.batch_size, 16);
        assert_eq!(full.train.weight_decay, 1e-2);
        assert_eq!(full.learning_rates, vec![1e-5, 3e-5, 5e-5]);
        assert_eq!(full.denominator, Denominator::NegativesOnly);
        assert_eq!(full.template, TemplateSpec::Continuous(3));
        assert_eq!(full.data.train, dir.path().join("train.jsonl"));

        let few = RunConfig::parse(
            "[data]\ntrain = train.jsonl\n[fewshot]\nk = 8\n",
            dir.path(),
        )
        .unwrap();
        assert_eq!(few.train.epochs, 30);
        assert_eq!(few.fewshot.unwrap().seeds, DEFAULT_SEEDS.to_vec());
    }

    #[test]
    fn overrides_are_read() {
        let dir = dir_with_train();
        let text = "[data]\ntrain = train.jsonl\nmetric = micro_f1\n[encoder]\nkind = external:frozen-random\nd_e = 8\n\
                    [prompt]\nm = 3\ntemplate_text = the relation is\n[loss]\ninclude_positive_in_denominator = true\n\
                    [train]\nlearning_rate = 0.01\nablation = no_lcon, no_siamese\n";
        let c = RunConfig::parse(text, dir.path()).unwrap();
        assert_eq!(c.encoder, EncoderKind::External("frozen-random".into()));
        assert_eq!(c.toy.dim, 8);
        assert_eq!(c.m, Some(3));
        assert_eq!(
            c.template,
            TemplateSpec::Discrete(vec!["the".into(), "relation".into(), "is".into()])
        );
        assert_eq!(c.denominator, Denominator::WithPositive);
        assert_eq!(c.learning_rates, vec![0.01]);
        assert_eq!(c.data.metric, Metric::MicroF1);
        assert_eq!(c.ablations.to_string(), "no_lcon,no_siamese");
        assert_eq!(c.hash, config_hash(text));
        assert_eq!(c.hash.len(), 16);
    }

    #[test]
    fn errors_name_the_key() {
        let dir = dir_with_train();
        let key = |text: &str| match RunConfig::parse(text, dir.path()) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key("[data]\n"), "data.train");
        assert_eq!(key("[data]\ntrain = missing.jsonl\n"), "data.train");
        assert_eq!(
            key("[data]\ntrain = train.jsonl\n[train]\nablation = no_magic\n"),
            "train.ablation"
        );
        assert_eq!(
            key("[data]\ntrain = train.jsonl\n[train]\nepochz = 3\n"),
            "train.epochz"
        );
        assert_eq!(
            key("[data]\ntrain = train.jsonl\n[extra]\na = 1\n"),
            "extra"
        );
        assert_eq!(
            key("[data]\ntrain = train.jsonl\n[train]\nbatch_size = x\n"),
            "train.batch_size"
        );
        assert_eq!(
            key("[data]\ntrain = train.jsonl\n[encoder]\nkind = gpt\n"),
            "encoder.kind"
        );
    }
}
