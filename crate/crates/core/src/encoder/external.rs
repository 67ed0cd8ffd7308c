//! Adapter for masked language models computed outside the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use super::{glorot, Encoded, EncoderBackend, Vocabulary};
use crate::autodiff::{Graph, ParamId, ParamStore, Var, Vjp};
use crate::error::{Error, Result};

/// The contract an external masked language model has to satisfy.
///
/// Hidden states are computed from input embeddings so that continuous
/// prompt vectors can be spliced into the sequence.
pub trait ExternalMlm: Send + Sync {
    fn dim(&self) -> usize;

    fn max_length(&self) -> usize;

    fn vocabulary(&self) -> &Vocabulary;

    /// Input embeddings for token ids, `l × d_e`.
    fn embed_ids(&self, ids: &[usize]) -> Array2<f64>;

    /// Per-position hidden states for an embedded sequence, `L × d_e`.
    fn hidden_states(&self, embedded: &Array2<f64>) -> Array2<f64>;

    /// Gradient of `⟨grad, hidden_states(embedded)⟩` with respect to
    /// `embedded`. Models that cannot provide one return `None`, which
    /// leaves prompt-side vectors without an encoder gradient.
    fn hidden_states_vjp(
        &self,
        _embedded: &Array2<f64>,
        _grad: &Array2<f64>,
    ) -> Option<Array2<f64>> {
        None
    }

    /// Token ids and a mask position in; per-token states and the mask
    /// state out.
    fn encode_ids(&self, ids: &[usize], mask_position: usize) -> (Array2<f64>, Array1<f64>) {
        let states = self.hidden_states(&self.embed_ids(ids));
        let mask = states.row(mask_position).to_owned();
        (states, mask)
    }
}

/// What a registry factory receives when an adapter is loaded.
#[derive(Debug, Clone)]
pub struct AdapterOptions {
    pub vocabulary: Vocabulary,
    pub dim: usize,
    pub max_length: usize,
    pub seed: u64,
}

type Factory = Box<dyn Fn(&AdapterOptions) -> Result<Arc<dyn ExternalMlm>> + Send + Sync>;

/// Name → constructor map for external models.
pub struct AdapterRegistry {
    factories: BTreeMap<String, Factory>,
}

impl fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("frozen-random", |opts| {
            Ok(Arc::new(FrozenRandomMlm::new(
                opts.vocabulary.clone(),
                opts.dim,
                opts.max_length,
                opts.seed,
            )))
        });
        r
    }
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&AdapterOptions) -> Result<Arc<dyn ExternalMlm>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_owned(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn load(&self, name: &str, options: &AdapterOptions) -> Result<Arc<dyn ExternalMlm>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownAdapter(name.to_owned()))?;
        factory(options)
    }
}

struct ExternalVjp(Arc<dyn ExternalMlm>);

impl Vjp for ExternalVjp {
    fn vjp(&self, input: &Array2<f64>, grad_out: &Array2<f64>) -> Option<Array2<f64>> {
        self.0.hidden_states_vjp(input, grad_out)
    }
}

/// Wraps an [`ExternalMlm`]. The wrapped model is frozen; the adapter
/// exposes a trainable `d_e × d_e` output projection (identity at init).
#[derive(Clone)]
pub struct ExternalMlmAdapter {
    name: String,
    inner: Arc<dyn ExternalMlm>,
    projection: ParamId,
}

impl fmt::Debug for ExternalMlmAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalMlmAdapter")
            .field("name", &self.name)
            .field("dim", &self.inner.dim())
            .finish()
    }
}

impl ExternalMlmAdapter {
    pub fn new(
        name: &str,
        inner: Arc<dyn ExternalMlm>,
        store: &mut ParamStore,
        prefix: &str,
    ) -> Self {
        let d = inner.dim();
        let projection = store.add(format!("{prefix}.projection"), Array2::eye(d));
        Self {
            name: name.to_owned(),
            inner,
            projection,
        }
    }

    pub fn inner(&self) -> &Arc<dyn ExternalMlm> {
        &self.inner
    }
}

impl EncoderBackend for ExternalMlmAdapter {
    fn kind(&self) -> String {
        format!("external:{}", self.name)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn max_length(&self) -> usize {
        self.inner.max_length()
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(self.inner.vocabulary())
    }

    fn embed(&self, g: &mut Graph, _store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let vocab = self.inner.vocabulary().len();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                classes: vocab,
            });
        }
        Ok(g.constant(self.inner.embed_ids(tokens)))
    }

    fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sequence: Var,
        mask_position: Option<usize>,
    ) -> Result<Encoded> {
        let (len, d) = g.shape(sequence);
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "external encoder input",
                expected: self.dim(),
                found: d,
            });
        }
        if len > self.max_length() {
            return Err(Error::LengthOverflow {
                length: len,
                max: self.max_length(),
            });
        }
        let hidden = self.inner.hidden_states(g.value(sequence));
        let raw = g.custom(sequence, hidden, Arc::new(ExternalVjp(self.inner.clone())));
        let proj = g.param(store, self.projection);
        let states = g.matmul(raw, proj);
        let mask = match mask_position {
            Some(p) if p >= len => {
                return Err(Error::IndexOutOfRange {
                    index: p,
                    classes: len,
                })
            }
            Some(p) => Some(g.row(states, p)),
            None => None,
        };
        Ok(Encoded { states, mask })
    }
}

/// A fixed, randomly initialised stand-in for a pretrained MLM:
/// `H = tanh(X·A + 1·mean(X)·B)`. Ships with the registry under
/// `"frozen-random"` and provides an exact vector-Jacobian product.
#[derive(Debug, Clone)]
pub struct FrozenRandomMlm {
    vocab: Vocabulary,
    table: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    max_length: usize,
}

impl FrozenRandomMlm {
    pub fn new(vocab: Vocabulary, dim: usize, max_length: usize, seed: u64) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed ^ 0x6d6c_6d5f_6672_7a6e);
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let table = Array2::from_shape_fn((vocab.len(), dim), |_| normal.sample(&mut rng));
        let a = glorot(dim, dim, &mut rng);
        let b = glorot(dim, dim, &mut rng) * 0.5;
        Self {
            vocab,
            table,
            a,
            b,
            max_length,
        }
    }

    fn pre_activation(&self, x: &Array2<f64>) -> Array2<f64> {
        let mean = x.mean_axis(Axis(0)).expect("non-empty sequence");
        let ctx = mean.dot(&self.b);
        let mut pre = x.dot(&self.a);
        for mut row in pre.rows_mut() {
            row += &ctx;
        }
        pre
    }
}

impl ExternalMlm for FrozenRandomMlm {
    fn dim(&self) -> usize {
        self.table.ncols()
    }

    fn max_length(&self) -> usize {
        self.max_length
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn embed_ids(&self, ids: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (k, &i) in ids.iter().enumerate() {
            out.row_mut(k).assign(&self.table.row(i));
        }
        out
    }

    fn hidden_states(&self, embedded: &Array2<f64>) -> Array2<f64> {
        self.pre_activation(embedded).mapv(f64::tanh)
    }

    fn hidden_states_vjp(&self, embedded: &Array2<f64>, grad: &Array2<f64>) -> Option<Array2<f64>> {
        let h = self.hidden_states(embedded);
        let gp = grad * &h.mapv(|y| 1.0 - y * y);
        let mut dx = gp.dot(&self.a.t());
        let col = gp.sum_axis(Axis(0)).dot(&self.b.t()) / embedded.nrows() as f64;
        for mut row in dx.rows_mut() {
            row += &col;
        }
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FrozenRandomMlm {
        let vocab = Vocabulary::from_tokens(["x", "y", "z"].map(String::from));
        FrozenRandomMlm::new(vocab, 4, 16, 3)
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let m = model();
        let x = m.embed_ids(&[2, 3, 4]);
        let grad = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.0) * 0.3 + j as f64 * 0.1);
        let f = |x: &Array2<f64>| (&m.hidden_states(x) * &grad).sum();
        let analytic = m.hidden_states_vjp(&x, &grad).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / 4, idx % 4);
            let mut p = x.clone();
            let mut q = x.clone();
            p[[r, c]] += h;
            q[[r, c]] -= h;
            let num = (f(&p) - f(&q)) / (2.0 * h);
            assert!((num - analytic[[r, c]]).abs() < 1e-7);
        }
    }

    #[test]
    fn registry_loads_by_name() {
        let reg = AdapterRegistry::default();
        let opts = AdapterOptions {
            vocabulary: Vocabulary::default(),
            dim: 3,
            max_length: 8,
            seed: 1,
        };
        let mlm = reg.load("frozen-random", &opts).unwrap();
        assert_eq!(mlm.dim(), 3);
        assert!(matches!(
            reg.load("nope", &opts),
            Err(Error::UnknownAdapter(_))
        ));
        let (states, mask) = mlm.encode_ids(&[0, 1, 0], 1);
        assert_eq!(states.dim(), (3, 3));
        assert_eq!(mask, states.row(1));
    }

    #[test]
    fn adapter_passes_gradients_to_inputs_and_projection() {
        let m = model();
        let mut store = ParamStore::new();
        let adapter = ExternalMlmAdapter::new("frozen-random", Arc::new(m), &mut store, "ext");
        let mut g = Graph::new();
        let x = g.input(Array2::from_elem((3, 4), 0.2));
        let out = adapter.encode(&mut g, &store, x, Some(2)).unwrap();
        let loss = g.sum(out.mask.unwrap());
        let grads = g.backward(loss);
        assert!(grads.wrt(x).unwrap().iter().any(|v| v.abs() > 0.0));
        assert_eq!(grads.params().len(), 1);
        assert_eq!(adapter.kind(), "external:frozen-random");
    }
}
