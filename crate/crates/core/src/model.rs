//! The full prompt-tuning model: encoder, heads, verbalizer, prototype
//! bank and template tokens, plus its differentiable forward pass.
//!
//! Per instance the forward pass
//!
//! 1. encodes the bare instance and mean-pools the head outputs into `h_x`;
//! 2. projects `h_x` onto every fact/counterfact direction;
//! 3. scores each attribute against its aligned prototype and keeps the
//!    top `m`;
//! 4. encodes the prompt built from the selected attributes and reads the
//!    class scores off the mask state;
//! 5. during training, also encodes the prompt built from the gold fact's
//!    attributes and adds the Siamese and prototype losses.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::contrastive::{PairIndex, Verbalizer, DEGENERATE_EPS};
use crate::encoder::{
    instance_states, AdapterOptions, AdapterRegistry, EncoderBackend, ExternalMlmAdapter, Head,
    InstanceStates, ToyEncoder, ToyEncoderConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::losses::{classification_loss_graph, siamese_loss_graph, LossBundle, LossWeights};
use crate::prompt::{argmax, assemble_prompt_graph, mask_class_logits_graph};
use crate::prototype::{
    rank_slots, Denominator, PrototypeBank, SelectedAttribute, SelectionResult, INIT_STD,
};

/// Component switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    /// No contrastive attributes: plain template plus soft verbalizer.
    NoConAtt,
    /// Selection (and the prototype loss) score each attribute `c_ij`
    /// against the verbalizer row `v_i` instead of a learned prototype.
    NoPrototypes,
    /// Drop the prototype loss.
    NoLcon,
    /// Drop the Siamese branch and its loss.
    NoSiamese,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoConAtt,
        Ablation::NoPrototypes,
        Ablation::NoLcon,
        Ablation::NoSiamese,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::NoConAtt => "no_conatt",
            Ablation::NoPrototypes => "no_prototypes",
            Ablation::NoLcon => "no_lcon",
            Ablation::NoSiamese => "no_siamese",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::config("ablation", format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ablations(BTreeSet<Ablation>);

impl Ablations {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, a: Ablation) -> Self {
        self.0.insert(a);
        self
    }

    pub fn insert(&mut self, a: Ablation) {
        self.0.insert(a);
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    /// Parses a comma-separated list; empty input means no ablation.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut out = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            out.insert(part.parse()?);
        }
        Ok(out)
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(Ablation::as_str).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderKind {
    Toy,
    /// An adapter looked up by name in an [`AdapterRegistry`].
    External(String),
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Toy => f.write_str("toy"),
            EncoderKind::External(n) => write!(f, "external:{n}"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(EncoderKind::Toy),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(EncoderKind::External(name.to_owned())),
                _ => Err(Error::config(
                    "encoder.kind",
                    format!("unknown encoder {other:?}"),
                )),
            },
        }
    }
}

/// The `e_t1 … e_tn` block of the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateSpec {
    /// `n` trainable continuous vectors.
    Continuous(usize),
    /// Fixed text, embedded through the backend vocabulary.
    Discrete(Vec<String>),
}

impl Default for TemplateSpec {
    fn default() -> Self {
        TemplateSpec::Continuous(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub labels: Vec<String>,
    pub encoder: EncoderKind,
    /// Dimensions of the toy encoder; for adapters only `dim` and
    /// `max_length` are used.
    pub toy: ToyEncoderConfig,
    pub head_hidden: usize,
    pub template: TemplateSpec,
    /// Number of selected attributes; `R − 1` when unset.
    pub m: Option<usize>,
    /// Whether `h_x` is computed by the same encoder weights as the prompt.
    pub share_encoder: bool,
    pub denominator: Denominator,
    pub weights: LossWeights,
    pub ablations: Ablations,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(labels: Vec<String>) -> Self {
        Self {
            labels,
            encoder: EncoderKind::Toy,
            toy: ToyEncoderConfig::default(),
            head_hidden: 32,
            template: TemplateSpec::default(),
            m: None,
            share_encoder: true,
            denominator: Denominator::NegativesOnly,
            weights: LossWeights::default(),
            ablations: Ablations::none(),
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Effective number of selected attributes.
    pub fn effective_m(&self) -> usize {
        if self.ablations.has(Ablation::NoConAtt) {
            0
        } else {
            self.m.unwrap_or(self.num_classes() - 1)
        }
    }
}

/// Differentiable values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub instance: InstanceStates,
    /// `R(R − 1) × d_e` attributes in slot order.
    pub attributes: Option<Var>,
    /// `R(R − 1) × 1` selection scores.
    pub scores: Option<Var>,
    pub selection: SelectionResult,
    pub z: Var,
    pub z_plus: Option<Var>,
    pub logits: Var,
    pub l_cls: Option<Var>,
    pub l_s: Option<Var>,
    pub l_con: Option<Var>,
    pub total: Option<Var>,
    pub degenerate_pairs: Vec<(usize, usize)>,
}

impl Forward {
    /// Scalar loss values; missing terms count as 0.
    pub fn bundle(&self, g: &Graph, weights: &LossWeights) -> LossBundle {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        LossBundle::new(get(self.l_cls), get(self.l_s), get(self.l_con), weights)
    }
}

/// Output of [`CcPromptModel::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Array1<f64>,
    pub selection: SelectionResult,
}

#[derive(Debug, Clone)]
enum Template {
    Continuous(ParamId),
    Discrete(Vec<usize>),
}

pub struct CcPromptModel {
    config: ModelConfig,
    store: ParamStore,
    vocab: Vocabulary,
    backend: Box<dyn EncoderBackend>,
    rep_backend: Option<Box<dyn EncoderBackend>>,
    rep_head: Head,
    predictor: Head,
    verbalizer: ParamId,
    prototypes: ParamId,
    similarity_weight: ParamId,
    template: Template,
}

impl fmt::Debug for CcPromptModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CcPromptModel")
            .field("encoder", &self.backend.kind())
            .field("classes", &self.config.num_classes())
            .field("dim", &self.dim())
            .field("parameters", &self.store.num_scalars())
            .finish()
    }
}

impl CcPromptModel {
    /// Builds a randomly initialised model with the toy encoder or a
    /// built-in adapter.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        Self::with_registry(config, vocab, &AdapterRegistry::default())
    }

    pub fn with_registry(
        config: ModelConfig,
        vocab: Vocabulary,
        registry: &AdapterRegistry,
    ) -> Result<Self> {
        let r = config.num_classes();
        if r < 2 {
            return Err(Error::config("labels", "need at least two classes"));
        }
        let m = config.effective_m();
        if !config.ablations.has(Ablation::NoConAtt) && (m == 0 || m > r * (r - 1)) {
            return Err(Error::InvalidM {
                m,
                max: r * (r - 1),
            });
        }
        let mut rng = Pcg64::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.toy.dim;

        let make_backend = |store: &mut ParamStore,
                            prefix: &str,
                            rng: &mut Pcg64|
         -> Result<Box<dyn EncoderBackend>> {
            Ok(match &config.encoder {
                EncoderKind::Toy => Box::new(ToyEncoder::new(
                    config.toy.clone(),
                    vocab.clone(),
                    store,
                    prefix,
                    rng,
                )),
                EncoderKind::External(name) => {
                    let opts = AdapterOptions {
                        vocabulary: vocab.clone(),
                        dim: d,
                        max_length: config.toy.max_length,
                        seed: config.seed,
                    };
                    let inner = registry.load(name, &opts)?;
                    Box::new(ExternalMlmAdapter::new(name, inner, store, prefix))
                }
            })
        };
        let backend = make_backend(&mut store, "encoder", &mut rng)?;
        let rep_backend = if config.share_encoder {
            None
        } else {
            Some(make_backend(&mut store, "rep_encoder", &mut rng)?)
        };
        if backend.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "encoder dim",
                expected: d,
                found: backend.dim(),
            });
        }

        let rep_head = Head::mlp(&mut store, "rep_head", d, config.head_hidden, &mut rng);
        let predictor = Head::mlp(&mut store, "predictor", d, config.head_hidden, &mut rng);

        let verbalizer_init = init_verbalizer(&config.labels, backend.as_ref(), &store, &mut rng);
        let verbalizer = store.add("verbalizer", verbalizer_init);

        let bank = PrototypeBank::random(r, d, &mut rng)?;
        let prototypes = store.add("prototypes", bank.flat());
        let similarity_weight = store.add("similarity_weight", bank.similarity_weight().to_owned());

        let template = match &config.template {
            TemplateSpec::Continuous(n) => {
                let normal = Normal::new(0.0, config.toy.embedding_std).expect("valid std");
                Template::Continuous(store.add(
                    "template",
                    Array2::from_shape_fn((*n, d), |_| normal.sample(&mut rng)),
                ))
            }
            TemplateSpec::Discrete(tokens) => {
                let backend_vocab = backend.vocabulary().unwrap_or(&vocab);
                Template::Discrete(backend_vocab.encode(tokens))
            }
        };

        Ok(Self {
            config,
            store,
            vocab,
            backend,
            rep_backend,
            rep_head,
            predictor,
            verbalizer,
            prototypes,
            similarity_weight,
            template,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn backend(&self) -> &dyn EncoderBackend {
        self.backend.as_ref()
    }

    pub fn predictor(&self) -> &Head {
        &self.predictor
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.config.toy.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.config.labels
    }

    /// Token ids for whitespace tokens, unknown tokens mapped to `[UNK]`.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.backend
            .vocabulary()
            .unwrap_or(&self.vocab)
            .encode(tokens)
    }

    pub fn verbalizer(&self) -> Verbalizer {
        Verbalizer::new(
            self.store.get(self.verbalizer).clone(),
            self.config.labels.clone(),
        )
        .expect("verbalizer parameters keep their shape")
    }

    pub fn prototype_bank(&self) -> PrototypeBank {
        let r = self.num_classes();
        let protos = self
            .store
            .get(self.prototypes)
            .clone()
            .into_shape_with_order((r, r - 1, self.dim()))
            .expect("prototype parameters keep their shape");
        PrototypeBank::new(protos, self.store.get(self.similarity_weight).clone())
            .expect("prototype parameters keep their shape")
    }

    /// Per-token representations of the bare instance (the rows whose mean
    /// is `h_x`), `l × d_e`.
    pub fn token_states(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let rep = self.rep_backend.as_deref().unwrap_or(self.backend.as_ref());
        let states = instance_states(&mut g, &self.store, rep, &self.rep_head, tokens)?;
        Ok(g.value(states.tokens).clone())
    }

    /// Records the forward pass for one instance. With `gold` set, the loss
    /// terms are added; without it only the inference branch runs.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], gold: Option<usize>) -> Result<Forward> {
        let r = self.num_classes();
        if let Some(gold) = gold {
            if gold >= r {
                return Err(Error::InvalidGold { gold, classes: r });
            }
        }
        let ab = &self.config.ablations;
        let store = &self.store;
        let backend = self.backend.as_ref();

        let embedded = backend.embed(g, store, tokens)?;
        let instance = match &self.rep_backend {
            None => {
                if tokens.is_empty() {
                    return Err(Error::EmptySequence);
                }
                let enc = backend.encode(g, store, embedded, None)?;
                let per_token = self.rep_head.forward(g, store, enc.states);
                let pooled = g.mean_rows(per_token);
                InstanceStates {
                    tokens: per_token,
                    pooled,
                }
            }
            Some(rep) => instance_states(g, store, rep.as_ref(), &self.rep_head, tokens)?,
        };

        let verbalizer = g.param(store, self.verbalizer);
        let template = match &self.template {
            Template::Continuous(id) => Some(g.param(store, *id)),
            Template::Discrete(ids) if ids.is_empty() => None,
            Template::Discrete(ids) => Some(backend.embed(g, store, ids)?),
        };
        let mask_id = backend.vocabulary().unwrap_or(&self.vocab).mask_id();
        let mask = backend.embed(g, store, &[mask_id])?;
        let max_len = backend.max_length();

        let mut out = Forward {
            instance,
            attributes: None,
            scores: None,
            selection: SelectionResult::default(),
            z: instance.pooled,
            z_plus: None,
            logits: instance.pooled,
            l_cls: None,
            l_s: None,
            l_con: None,
            total: None,
            degenerate_pairs: Vec::new(),
        };

        let selected_rows = if ab.has(Ablation::NoConAtt) {
            None
        } else {
            let index = PairIndex::new(r);
            let (attrs, degenerate) = attribute_rows(g, instance.pooled, verbalizer, index);
            out.degenerate_pairs = degenerate;
            let protos = if ab.has(Ablation::NoPrototypes) {
                let facts: Vec<usize> = index.pairs().map(|(i, _)| i).collect();
                g.gather(verbalizer, &facts)
            } else {
                g.param(store, self.prototypes)
            };
            let w = g.param(store, self.similarity_weight);
            let wt = g.transpose(w);
            let projected = g.matmul(attrs, wt);
            let prod = g.mul(projected, protos);
            let scores = g.row_sums(prod);

            let score_values: Vec<f64> = g.value(scores).iter().copied().collect();
            let slots = rank_slots(&score_values, self.config.effective_m())?;
            let attr_values = g.value(attrs);
            out.selection = SelectionResult {
                selected: slots
                    .iter()
                    .map(|&slot| {
                        let (fact, counterfact) = index.pair(slot);
                        SelectedAttribute {
                            fact,
                            counterfact,
                            attribute: attr_values.row(slot).to_owned(),
                            score: score_values[slot],
                        }
                    })
                    .collect(),
            };

            if let Some(gold) = gold {
                if !ab.has(Ablation::NoLcon) {
                    out.l_con = Some(prototype_loss_graph(
                        g,
                        projected,
                        protos,
                        index,
                        gold,
                        self.config.denominator,
                    ));
                }
            }
            out.attributes = Some(attrs);
            out.scores = Some(scores);
            Some(g.gather(attrs, &slots))
        };

        let (prompt, layout) =
            assemble_prompt_graph(g, embedded, selected_rows, template, mask, max_len)?;
        let z = backend
            .encode(g, store, prompt, Some(layout.mask_position()))?
            .mask
            .expect("mask position requested");
        out.z = z;
        out.logits = mask_class_logits_graph(g, z, verbalizer);

        if let Some(gold) = gold {
            out.l_cls = Some(classification_loss_graph(g, out.logits, gold)?);

            if let (Some(attrs), false) = (out.attributes, ab.has(Ablation::NoSiamese)) {
                let positive = g.rows(attrs, gold * (r - 1), r - 1);
                let (prompt_plus, layout_plus) =
                    assemble_prompt_graph(g, embedded, Some(positive), template, mask, max_len)?;
                let z_plus = backend
                    .encode(g, store, prompt_plus, Some(layout_plus.mask_position()))?
                    .mask
                    .expect("mask position requested");
                out.z_plus = Some(z_plus);
                out.l_s = Some(siamese_loss_graph(g, store, &self.predictor, z, z_plus)?);
            }

            let w = &self.config.weights;
            let mut total = g.scale(out.l_cls.expect("set above"), w.cls);
            if let Some(ls) = out.l_s {
                let t = g.scale(ls, w.siamese);
                total = g.add(total, t);
            }
            if let Some(lc) = out.l_con {
                let t = g.scale(lc, w.contrastive);
                total = g.add(total, t);
            }
            out.total = Some(total);
        }
        Ok(out)
    }

    /// Inference: only the selected-attribute prompt is encoded.
    pub fn predict(&self, tokens: &[usize]) -> Result<Prediction> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, tokens, None)?;
        let logits: Array1<f64> = g.value(fwd.logits).row(0).to_owned();
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericFailure("logits".into()));
        }
        Ok(Prediction {
            class: argmax(logits.view()),
            logits,
            selection: fwd.selection,
        })
    }

    /// Losses for one labelled instance without touching gradients.
    pub fn losses(&self, tokens: &[usize], gold: usize) -> Result<LossBundle> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, tokens, Some(gold))?;
        Ok(fwd.bundle(&g, &self.config.weights))
    }

    /// Overwrites a parameter by name, checking its shape.
    pub fn set_param(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if self.store.get(id).dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} does not match {:?}",
                value.dim(),
                self.store.get(id).dim()
            )));
        }
        *self.store.get_mut(id) = value;
        Ok(())
    }

    /// Replaces the prototype bank parameters.
    pub fn set_prototype_bank(&mut self, bank: &PrototypeBank) -> Result<()> {
        self.set_param("prototypes", bank.flat())?;
        self.set_param("similarity_weight", bank.similarity_weight().to_owned())
    }

    pub fn set_verbalizer(&mut self, vectors: Array2<f64>) -> Result<()> {
        self.set_param("verbalizer", vectors)
    }
}

/// Mean of the backend embeddings of each label's tokens (label names are
/// split on whitespace, `_`, `:`, `-` and `/`); labels with no known token
/// fall back to Normal(0, 0.02).
fn init_verbalizer(
    labels: &[String],
    backend: &dyn EncoderBackend,
    store: &ParamStore,
    rng: &mut Pcg64,
) -> Array2<f64> {
    let d = backend.dim();
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut out = Array2::zeros((labels.len(), d));
    for (i, label) in labels.iter().enumerate() {
        let known: Vec<usize> = match backend.vocabulary() {
            Some(vocab) => label
                .split(|c: char| c.is_whitespace() || "_:-/".contains(c))
                .filter_map(|t| vocab.get(t))
                .filter(|&id| id > vocab.mask_id())
                .collect(),
            None => Vec::new(),
        };
        let row = if known.is_empty() {
            Array1::from_shape_fn(d, |_| normal.sample(rng))
        } else {
            let mut g = Graph::new();
            let e = backend
                .embed(&mut g, store, &known)
                .expect("ids come from the backend vocabulary");
            g.value(e).mean_axis(ndarray::Axis(0)).expect("non-empty")
        };
        out.row_mut(i).assign(&row);
    }
    out
}

/// Attribute rows `c_ij` in slot order and the list of degenerate pairs
/// (whose attributes are zero).
fn attribute_rows(
    g: &mut Graph,
    h: Var,
    verbalizer: Var,
    index: PairIndex,
) -> (Var, Vec<(usize, usize)>) {
    let r = index.classes();
    let rows: Vec<Var> = (0..r).map(|i| g.row(verbalizer, i)).collect();
    let d = g.shape(h).1;
    let mut attrs = Vec::with_capacity(index.num_slots());
    let mut degenerate = Vec::new();
    for (i, j) in index.pairs() {
        let u = g.sub(rows[i], rows[j]);
        let uu = g.dot(u, u);
        if g.scalar(uu).sqrt() <= DEGENERATE_EPS {
            log::warn!("degenerate contrastive subspace ({i}, {j}); attribute set to zero");
            degenerate.push((i, j));
            attrs.push(g.constant(Array2::zeros((1, d))));
            continue;
        }
        let hu = g.dot(h, u);
        let alpha = g.div_scalar(hu, uu);
        attrs.push(g.mul_scalar(u, alpha));
    }
    (g.concat_rows(&attrs), degenerate)
}

/// Prototype loss on a graph. `projected` holds `(W·c)ᵀ` per slot.
fn prototype_loss_graph(
    g: &mut Graph,
    projected: Var,
    protos: Var,
    index: PairIndex,
    gold: usize,
    denom: Denominator,
) -> Var {
    let r = index.classes();
    let negative_slots: Vec<usize> = (0..index.num_slots())
        .filter(|&s| index.pair(s).0 != gold)
        .collect();
    let negatives = g.gather(protos, &negative_slots);
    let mut terms = Vec::with_capacity(r - 1);
    for k in 0..r - 1 {
        let slot = gold * (r - 1) + k;
        let wc = g.row(projected, slot);
        let p = g.row(protos, slot);
        let pos = g.dot(wc, p);
        let wct = g.transpose(wc);
        let neg = g.matmul(negatives, wct);
        let pool = match denom {
            Denominator::NegativesOnly => neg,
            Denominator::WithPositive => g.concat_rows(&[neg, pos]),
        };
        let lse = g.logsumexp(pool);
        terms.push(g.sub(lse, pos));
    }
    let stacked = g.concat_rows(&terms);
    let sum = g.sum(stacked);
    g.scale(sum, 1.0 / (r - 1) as f64)
}

/// Shared handle so several threads can run inference on one model.
pub type SharedModel = Arc<CcPromptModel>;

impl CcPromptModel {
    /// Prototype tensor in `R × (R − 1) × d_e` layout.
    pub fn prototypes_3d(&self) -> Array3<f64> {
        self.prototype_bank().prototypes().clone()
    }
}
