//! Encoder backends, the representation MLP head, and instance
//! representations.
//!
//! A backend embeds token ids into an `l × d_e` matrix and encodes any
//! embedded sequence (which may contain continuous prompt vectors) into
//! per-position hidden states. Two backends ship with the crate:
//! [`ToyEncoder`], a small self-contained attention encoder that is
//! differentiable end to end, and [`ExternalMlmAdapter`], which wraps a
//! masked language model supplied from outside the crate.

mod external;
mod toy;
mod vocab;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use external::{
    AdapterOptions, AdapterRegistry, ExternalMlm, ExternalMlmAdapter, FrozenRandomMlm,
};
pub use toy::{ToyEncoder, ToyEncoderConfig};
pub use vocab::{tokenize, Vocabulary, MASK_TOKEN, UNK_TOKEN};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::contrastive::InstanceRepresentation;
use crate::error::{Error, Result};

/// Output of [`EncoderBackend::encode`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Per-position hidden states, `L × d_e`.
    pub states: Var,
    /// Hidden state at the mask position, `1 × d_e`.
    pub mask: Option<Var>,
}

pub trait EncoderBackend: Send + Sync {
    /// Short identifier recorded in checkpoints and logs.
    fn kind(&self) -> String;

    fn dim(&self) -> usize;

    fn max_length(&self) -> usize;

    fn vocabulary(&self) -> Option<&Vocabulary>;

    /// Token embeddings `e_1 … e_l`.
    fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var>;

    /// Contextual states of an embedded sequence.
    fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sequence: Var,
        mask_position: Option<usize>,
    ) -> Result<Encoded>;
}

/// A one-hidden-layer ReLU MLP mapping `d_e → d_e`, or the identity.
#[derive(Debug, Clone)]
pub enum Head {
    Identity,
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

/// MLP applied per token before mean pooling.
pub type RepresentationHead = Head;

/// MLP `f(·)` on the gradient-carrying side of the Siamese loss.
pub type PredictorHead = Head;

impl Head {
    pub fn mlp<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Head::Mlp {
            w1: store.add(format!("{prefix}.w1"), glorot(dim, hidden, rng)),
            b1: store.add(format!("{prefix}.b1"), Array2::zeros((1, hidden))),
            w2: store.add(format!("{prefix}.w2"), glorot(hidden, dim, rng)),
            b2: store.add(format!("{prefix}.b2"), Array2::zeros((1, dim))),
        }
    }

    /// Applies the head to every row of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            Head::Identity => x,
            Head::Mlp { w1, b1, w2, b2 } => {
                let w1 = g.param(store, *w1);
                let b1 = g.param(store, *b1);
                let w2 = g.param(store, *w2);
                let b2 = g.param(store, *b2);
                let a = g.matmul(x, w1);
                let a = g.add_row(a, b1);
                let a = g.relu(a);
                let o = g.matmul(a, w2);
                g.add_row(o, b2)
            }
        }
    }
}

/// Normal init with std `1/sqrt(fan_in)`.
pub(crate) fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
    Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng))
}

/// Per-token head outputs and their mean `h_x`, built on a graph.
#[derive(Debug, Clone, Copy)]
pub struct InstanceStates {
    /// `l × d_e` head outputs, one row per token.
    pub tokens: Var,
    /// `1 × d_e` mean-pooled representation.
    pub pooled: Var,
}

/// Encodes the bare instance, applies the head per token and mean-pools.
pub fn instance_states(
    g: &mut Graph,
    store: &ParamStore,
    backend: &dyn EncoderBackend,
    head: &Head,
    tokens: &[usize],
) -> Result<InstanceStates> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if tokens.len() > backend.max_length() {
        return Err(Error::LengthOverflow {
            length: tokens.len(),
            max: backend.max_length(),
        });
    }
    let embedded = backend.embed(g, store, tokens)?;
    let encoded = backend.encode(g, store, embedded, None)?;
    let per_token = head.forward(g, store, encoded.states);
    let pooled = g.mean_rows(per_token);
    Ok(InstanceStates {
        tokens: per_token,
        pooled,
    })
}

/// `h_x = meanpool(head(encode(embed(tokens))))`.
pub fn instance_representation(
    tokens: &[usize],
    backend: &dyn EncoderBackend,
    head: &Head,
    store: &ParamStore,
) -> Result<InstanceRepresentation> {
    let mut g = Graph::new();
    let states = instance_states(&mut g, store, backend, head, tokens)?;
    let h: Array1<f64> = g.value(states.pooled).row(0).to_owned();
    InstanceRepresentation::new(h, tokens.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_core::SeedableRng;
    use rand_pcg::Pcg64;

    /// Backend whose states are a fixed per-token table lookup.
    struct TableBackend {
        table: ParamId,
        dim: usize,
    }

    impl EncoderBackend for TableBackend {
        fn kind(&self) -> String {
            "table".into()
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn max_length(&self) -> usize {
            16
        }
        fn vocabulary(&self) -> Option<&Vocabulary> {
            None
        }
        fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
            let t = g.param(store, self.table);
            Ok(g.gather(t, tokens))
        }
        fn encode(
            &self,
            _g: &mut Graph,
            _store: &ParamStore,
            sequence: Var,
            _mask: Option<usize>,
        ) -> Result<Encoded> {
            Ok(Encoded {
                states: sequence,
                mask: None,
            })
        }
    }

    fn table(rows: Array2<f64>) -> (ParamStore, TableBackend) {
        let mut store = ParamStore::new();
        let dim = rows.ncols();
        let table = store.add("table", rows);
        (store, TableBackend { table, dim })
    }

    #[test]
    fn single_token_identity_head() {
        let (store, b) = table(array![[0.5, -1.5, 2.0]]);
        let h = instance_representation(&[0], &b, &Head::Identity, &store).unwrap();
        assert_eq!(h.vector(), array![0.5, -1.5, 2.0]);
        assert_eq!(h.source_length(), 1);
    }

    #[test]
    fn opposite_tokens_cancel() {
        let (store, b) = table(array![[0.5, -1.5], [-0.5, 1.5]]);
        let h = instance_representation(&[0, 1], &b, &Head::Identity, &store).unwrap();
        assert_eq!(h.vector(), array![0.0, 0.0]);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (store, b) = table(array![[1.0]]);
        assert!(matches!(
            instance_representation(&[], &b, &Head::Identity, &store),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn mlp_head_matches_per_position_loop() {
        let mut rng = Pcg64::seed_from_u64(11);
        let (mut store, b) = table(Array2::from_shape_fn((7, 4), |(i, j)| {
            ((i * 5 + j * 3) % 7) as f64 * 0.3 - 0.9
        }));
        let head = Head::mlp(&mut store, "head", 4, 6, &mut rng);
        let tokens = [3, 1, 4, 1, 5];
        let h = instance_representation(&tokens, &b, &head, &store).unwrap();

        let Head::Mlp { w1, b1, w2, b2 } = &head else {
            unreachable!()
        };
        let (w1, b1, w2, b2) = (
            store.get(*w1),
            store.get(*b1),
            store.get(*w2),
            store.get(*b2),
        );
        let tab = store.get(b.table);
        let mut acc = [0.0; 4];
        for &t in &tokens {
            let mut hidden = [0.0; 6];
            for (k, hk) in hidden.iter_mut().enumerate() {
                let mut s = b1[[0, k]];
                for a in 0..4 {
                    s += tab[[t, a]] * w1[[a, k]];
                }
                *hk = s.max(0.0);
            }
            for (o, acc_o) in acc.iter_mut().enumerate() {
                let mut s = b2[[0, o]];
                for (k, hk) in hidden.iter().enumerate() {
                    s += hk * w2[[k, o]];
                }
                *acc_o += s;
            }
        }
        for (o, a) in acc.iter().enumerate() {
            assert!((h.vector()[o] - a / tokens.len() as f64).abs() < 1e-10);
        }
    }
}
