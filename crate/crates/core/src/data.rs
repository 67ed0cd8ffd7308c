//! Dataset files, K-shot episodes and metrics.
//!
//! Datasets are JSON lines, one instance per line:
//!
//! ```text
//! {"id": "s1", "tokens": ["a", "b"], "label": "founded_by", "spans": [[0, 1, "head"]]}
//! ```
//!
//! A labels file fixes the class-id order, one name per line. A line of the
//! form `negative:<name>` declares the negative class excluded from F1
//! credit; without one, a class named `no_relation` plays that role.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NEGATIVE_LABEL: &str = "no_relation";

/// Stream selectors of the episode generator.
const TRAIN_STREAM: u128 = 0x7472_6169_6e5f_7374_7265_616d_5f30_3031;
const DEV_STREAM: u128 = 0x64_6576_5f73_7472_6561_6d5f_3030_3031;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: usize,
    pub spans: Vec<Span>,
}

/// Ordered class names plus the optional negative class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    negative: Option<usize>,
}

impl LabelSet {
    pub fn new(names: Vec<String>, negative: Option<usize>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::config("labels", format!("duplicate label {n:?}")));
            }
        }
        if let Some(neg) = negative {
            if neg >= names.len() {
                return Err(Error::IndexOutOfRange {
                    index: neg,
                    classes: names.len(),
                });
            }
        }
        Ok(Self { names, negative })
    }

    /// Parses a labels file body.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut negative = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            match line.strip_prefix("negative:") {
                Some(name) => {
                    negative = Some(names.len());
                    names.push(name.trim().to_owned());
                }
                None => names.push(line.to_owned()),
            }
        }
        if negative.is_none() {
            negative = names.iter().position(|n| n == DEFAULT_NEGATIVE_LABEL);
        }
        Self::new(names, negative)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Label names in order of first appearance.
    pub fn from_instances<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        for l in labels {
            if !names.iter().any(|n| n == l) {
                names.push(l.to_owned());
            }
        }
        let negative = names.iter().position(|n| n == DEFAULT_NEGATIVE_LABEL);
        Self::new(names, negative)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn negative(&self) -> Option<usize> {
        self.negative
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.names.iter().enumerate() {
            if self.negative == Some(i) && n != DEFAULT_NEGATIVE_LABEL {
                out.push_str("negative:");
            }
            out.push_str(n);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInstance {
    id: String,
    tokens: Vec<String>,
    label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    spans: Vec<(usize, usize, String)>,
}

/// Parses a JSONL body against a label set. `source` names the input in
/// error messages.
pub fn parse_jsonl(text: &str, labels: &LabelSet, source: &str) -> Result<Vec<LabeledInstance>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        let label = labels.id(&raw.label).ok_or_else(|| Error::UnknownLabel {
            path: source.into(),
            line: line_no,
            label: raw.label.clone(),
        })?;
        let len = raw.tokens.len();
        let mut spans = Vec::with_capacity(raw.spans.len());
        for (start, end, role) in raw.spans {
            if start > end || end > len {
                return Err(Error::SpanOutOfBounds {
                    path: source.into(),
                    line: line_no,
                    start,
                    end,
                    len,
                });
            }
            spans.push(Span { start, end, role });
        }
        if !ids.insert(raw.id.clone()) {
            return Err(Error::Parse {
                path: source.into(),
                line: line_no,
                message: format!("duplicate id {:?}", raw.id),
            });
        }
        out.push(LabeledInstance {
            id: raw.id,
            tokens: raw.tokens,
            label,
            spans,
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, labels: &LabelSet) -> Result<Vec<LabeledInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, labels, &path.display().to_string())
}

fn label_names(path: &Path, names: &mut Vec<String>) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        names.push(raw.label);
    }
    Ok(())
}

/// Label set over every label seen in `paths`, in order of first appearance.
pub fn infer_labels(paths: &[&Path]) -> Result<LabelSet> {
    let mut names = Vec::new();
    for p in paths {
        label_names(p, &mut names)?;
    }
    LabelSet::from_instances(names.iter().map(String::as_str))
}

/// Loads a JSONL split whose label vocabulary is taken from the file
/// itself, in order of first appearance.
pub fn load_with_inferred_labels(path: &Path) -> Result<(LabelSet, Vec<LabeledInstance>)> {
    let labels = infer_labels(&[path])?;
    let data = load_jsonl(path, &labels)?;
    Ok((labels, data))
}

pub fn to_jsonl(data: &[LabeledInstance], labels: &LabelSet) -> String {
    let mut out = String::new();
    for inst in data {
        let raw = RawInstance {
            id: inst.id.clone(),
            tokens: inst.tokens.clone(),
            label: labels.name(inst.label).to_owned(),
            spans: inst
                .spans
                .iter()
                .map(|s| (s.start, s.end, s.role.clone()))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("instances serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, data: &[LabeledInstance], labels: &LabelSet) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(data, labels).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// A K-shot train/dev draw from one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotEpisode {
    pub k: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub dev_ids: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub split_size: usize,
    pub num_classes: usize,
    pub generator: String,
    /// How the dev draw relates to the train draw.
    pub dev_stream: String,
    /// Classes with fewer than `2K` instances, as `(class, available)`.
    pub shortfalls: Vec<(usize, usize)>,
}

impl FewShotEpisode {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("episodes serialize")
    }

    /// Resolves the episode's ids against a split.
    pub fn select<'a>(
        &self,
        split: &'a [LabeledInstance],
    ) -> (Vec<&'a LabeledInstance>, Vec<&'a LabeledInstance>) {
        let by_id: BTreeMap<&str, &LabeledInstance> =
            split.iter().map(|i| (i.id.as_str(), i)).collect();
        let pick = |ids: &[String]| {
            ids.iter()
                .filter_map(|id| by_id.get(id.as_str()).copied())
                .collect()
        };
        (pick(&self.train_ids), pick(&self.dev_ids))
    }
}

/// PCG-64 generator for one `(seed, class)` pair on one stream.
pub fn episode_rng(seed: u64, class: usize, stream: u128) -> Pcg64 {
    Pcg64::new(((seed as u128) << 64) | class as u128, stream)
}

/// Uniform integer in `0..n` by rejection, independent of platform word size.
pub fn bounded(rng: &mut Pcg64, n: u64) -> u64 {
    assert!(n > 0);
    let zone = u64::MAX - (u64::MAX % n) - 1;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % n;
        }
    }
}

/// Draws `k` distinct positions from `0..n` with a partial Fisher–Yates
/// shuffle.
fn draw_without_replacement(rng: &mut Pcg64, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + bounded(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Samples `K` train and `K` dev instances per class. Classes are visited in
/// id order, members in split order. The dev draw uses its own stream and
/// rejects instances already taken for training.
pub fn sample_episode(
    split: &[LabeledInstance],
    num_classes: usize,
    k: usize,
    seed: u64,
    dataset: &str,
) -> Result<FewShotEpisode> {
    if k == 0 {
        return Err(Error::config("fewshot.k", "K must be at least 1"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, inst) in split.iter().enumerate() {
        if inst.label >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: inst.label,
                classes: num_classes,
            });
        }
        members[inst.label].push(i);
    }
    let mut train_ids = Vec::new();
    let mut dev_ids = Vec::new();
    let mut shortfalls = Vec::new();
    for (class, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            log::warn!("class {class} has no instances in {dataset}");
        } else if idx.len() < 2 * k {
            log::warn!(
                "class {class} has {} instances in {dataset}, fewer than 2K = {}",
                idx.len(),
                2 * k
            );
        }
        if idx.len() < 2 * k {
            shortfalls.push((class, idx.len()));
        }
        let mut rng = episode_rng(seed, class, TRAIN_STREAM);
        let picked = draw_without_replacement(&mut rng, idx.len(), k);
        let taken: HashSet<usize> = picked.iter().copied().collect();
        train_ids.extend(picked.iter().map(|&p| split[idx[p]].id.clone()));

        let mut dev_rng = episode_rng(seed, class, DEV_STREAM);
        let order = draw_without_replacement(&mut dev_rng, idx.len(), idx.len());
        dev_ids.extend(
            order
                .into_iter()
                .filter(|p| !taken.contains(p))
                .take(k)
                .map(|p| split[idx[p]].id.clone()),
        );
    }
    Ok(FewShotEpisode {
        k,
        seed,
        train_ids,
        dev_ids,
        provenance: Provenance {
            dataset: dataset.to_owned(),
            split_size: split.len(),
            num_classes,
            generator: "pcg64 (xsl-rr 128/64), state = seed << 64 | class".into(),
            dev_stream: "independent stream per (seed, class), train ids rejected".into(),
            shortfalls,
        },
    })
}

/// Micro-averaged F1. With a negative class, predictions and golds of that
/// class earn no credit; without one this equals accuracy.
pub fn micro_f1(predictions: &[usize], golds: &[usize], negative: Option<usize>) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    let positive = |c: usize| Some(c) != negative;
    let tp = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g && positive(**g))
        .count();
    let predicted = predictions.iter().filter(|&&p| positive(p)).count();
    let gold = golds.iter().filter(|&&g| positive(g)).count();
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / gold as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MicroF1,
    Accuracy,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "micro_f1" | "f1" => Ok(Metric::MicroF1),
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            other => Err(Error::config(
                "data.metric",
                format!("unknown metric {other:?}"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::MicroF1 => "micro_f1",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn compute(
        &self,
        predictions: &[usize],
        golds: &[usize],
        negative: Option<usize>,
    ) -> Result<f64> {
        match self {
            Metric::MicroF1 => micro_f1(predictions, golds, negative),
            Metric::Accuracy => accuracy(predictions, golds),
        }
    }
}

/// Mean and population standard deviation of per-seed scores.
pub fn seed_average(scores: &[f64]) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shape of a generated toy dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub length: usize,
    /// Probability that a token comes from the instance's own class pool.
    pub signal: f64,
    /// Pool size per class.
    pub pool: usize,
    /// Size of the shared filler pool.
    pub filler: usize,
    /// Probability that a non-signal token is borrowed from another class.
    pub confusion: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Classes with disjoint token pools; every instance carries class
    /// tokens, so bag-of-words is linearly separable.
    pub fn separable(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            length: 6,
            signal: 0.5,
            pool: 4,
            filler: 12,
            confusion: 0.0,
            seed,
        }
    }

    /// Pools that overlap through borrowed tokens and a weak signal.
    pub fn overlapping(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            length: 8,
            signal: 0.3,
            pool: 6,
            filler: 20,
            confusion: 0.35,
            seed,
        }
    }
}

/// Class names used by the generators.
pub fn synthetic_labels(classes: usize) -> LabelSet {
    LabelSet::new((0..classes).map(|c| format!("class_{c}")).collect(), None)
        .expect("distinct names")
}

fn uniform(rng: &mut Pcg64) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Generates instances with ids `"{split}-{n}"`; class `c` draws signal
/// tokens `c{c}t{i}`, filler tokens are `f{i}`. At least one signal token
/// is always present.
pub fn generate_synthetic(spec: &SyntheticSpec, split: &str) -> Vec<LabeledInstance> {
    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    let mut n = 0;
    for _ in 0..spec.per_class {
        for class in 0..spec.classes {
            let anchor = bounded(&mut rng, spec.length as u64) as usize;
            let tokens = (0..spec.length)
                .map(|pos| {
                    let u = uniform(&mut rng);
                    if pos == anchor || u < spec.signal {
                        format!("c{class}t{}", bounded(&mut rng, spec.pool as u64))
                    } else if spec.classes > 1 && uniform(&mut rng) < spec.confusion {
                        let other =
                            (class + 1 + bounded(&mut rng, (spec.classes - 1) as u64) as usize)
                                % spec.classes;
                        format!("c{other}t{}", bounded(&mut rng, spec.pool as u64))
                    } else {
                        format!("f{}", bounded(&mut rng, spec.filler as u64))
                    }
                })
                .collect();
            out.push(LabeledInstance {
                id: format!("{split}-{n}"),
                tokens,
                label: class,
                spans: Vec::new(),
            });
            n += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> LabelSet {
        LabelSet::parse("negative:none\nborn_in\nworks_for\n").unwrap()
    }

    #[test]
    fn labels_file_and_default_negative() {
        let l = labels();
        assert_eq!(l.len(), 3);
        assert_eq!(l.negative(), Some(0));
        assert_eq!(LabelSet::parse(&l.to_text()).unwrap(), l);
        let t = LabelSet::parse("a\nno_relation\nb").unwrap();
        assert_eq!(t.negative(), Some(1));
        assert_eq!(LabelSet::parse(&t.to_text()).unwrap(), t);
        assert!(LabelSet::parse("a\na").is_err());
    }

    #[test]
    fn three_line_file() {
        let text = r#"{"id":"1","tokens":["a","b"],"label":"born_in"}
{"id":"2","tokens":["c"],"label":"none"}
{"id":"3","tokens":["d","e","f"],"label":"works_for","spans":[[0,1,"head"],[2,3,"tail"]]}
"#;
        let data = parse_jsonl(text, &labels(), "mem").unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(
            data[2].spans[1],
            Span {
                start: 2,
                end: 3,
                role: "tail".into()
            }
        );
        let again = parse_jsonl(&to_jsonl(&data, &labels()), &labels(), "mem").unwrap();
        assert_eq!(again, data);
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let l = labels();
        let bad_label = "{\"id\":\"1\",\"tokens\":[\"a\"],\"label\":\"none\"}\n{\"id\":\"2\",\"tokens\":[\"a\"],\"label\":\"zzz\"}";
        assert!(matches!(
            parse_jsonl(bad_label, &l, "f"),
            Err(Error::UnknownLabel { line: 2, .. })
        ));
        assert!(matches!(
            parse_jsonl("{oops", &l, "f"),
            Err(Error::Parse { line: 1, .. })
        ));
        let span = r#"{"id":"1","tokens":["a"],"label":"none","spans":[[0,2,"x"]]}"#;
        assert!(matches!(
            parse_jsonl(span, &l, "f"),
            Err(Error::SpanOutOfBounds { end: 2, len: 1, .. })
        ));
        let dup = "{\"id\":\"1\",\"tokens\":[],\"label\":\"none\"}\n{\"id\":\"1\",\"tokens\":[],\"label\":\"none\"}";
        assert!(matches!(
            parse_jsonl(dup, &l, "f"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn episode_counts_and_determinism() {
        let spec = SyntheticSpec::separable(3, 10, 1);
        let data = generate_synthetic(&spec, "train");
        let ep = sample_episode(&data, 3, 2, 7, "toy").unwrap();
        assert_eq!(ep.train_ids.len(), 6);
        assert_eq!(ep.dev_ids.len(), 6);
        assert_eq!(ep, sample_episode(&data, 3, 2, 7, "toy").unwrap());
        assert_ne!(
            ep.train_ids,
            sample_episode(&data, 3, 2, 8, "toy").unwrap().train_ids
        );
        let train: HashSet<_> = ep.train_ids.iter().collect();
        assert!(ep.dev_ids.iter().all(|d| !train.contains(d)));
        assert!(sample_episode(&data, 3, 0, 7, "toy").is_err());
    }

    #[test]
    fn episode_shortfall_takes_what_exists() {
        let spec = SyntheticSpec::separable(2, 3, 1);
        let data = generate_synthetic(&spec, "train");
        let ep = sample_episode(&data, 3, 2, 0, "toy").unwrap();
        assert_eq!(ep.train_ids.len(), 4);
        assert_eq!(ep.dev_ids.len(), 2);
        assert_eq!(ep.provenance.shortfalls, vec![(0, 3), (1, 3), (2, 0)]);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(micro_f1(&[0, 1, 2], &[0, 1, 2], None).unwrap(), 1.0);
        assert_eq!(micro_f1(&[0, 0, 0], &[1, 2, 1], Some(0)).unwrap(), 0.0);
        let f = micro_f1(&[1, 2, 2, 0], &[1, 1, 2, 0], Some(0)).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            micro_f1(&[1], &[], None),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0], &[1, 2]).unwrap(), 0.5);
    }

    #[test]
    fn synthetic_sets_are_deterministic_and_balanced() {
        let spec = SyntheticSpec::overlapping(3, 20, 4);
        let a = generate_synthetic(&spec, "x");
        assert_eq!(a, generate_synthetic(&spec, "x"));
        for c in 0..3 {
            assert_eq!(a.iter().filter(|i| i.label == c).count(), 20);
        }
        assert!(a.iter().all(|i| i.tokens.len() == 8));
    }

    proptest! {
        #[test]
        fn f1_without_negative_is_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let f = micro_f1(&p, &g, None).unwrap();
            let a = accuracy(&p, &g).unwrap();
            prop_assert!((f - a).abs() < 1e-12);
        }

        #[test]
        fn bounded_stays_in_range(seed in any::<u64>(), n in 1u64..1000) {
            let mut rng = episode_rng(seed, 0, TRAIN_STREAM);
            for _ in 0..20 {
                prop_assert!(bounded(&mut rng, n) < n);
            }
        }
    }
}
