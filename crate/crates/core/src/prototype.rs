//! Global prototypes, bilinear similarity, top-m selection and the
//! self-contrastive prototype loss.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp;
use crate::contrastive::{ContrastiveAttributeTensor, PairIndex, Verbalizer};
use crate::error::{Error, Result};

/// Standard deviation of the prototype and similarity-weight noise at init.
pub const INIT_STD: f64 = 0.02;

/// Prototypes aligned one-to-one with attribute slots, plus the bilinear
/// similarity weight `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Array3<f64>,
    similarity_weight: Array2<f64>,
}

impl PrototypeBank {
    pub fn new(prototypes: Array3<f64>, similarity_weight: Array2<f64>) -> Result<Self> {
        let (r, k, d) = prototypes.dim();
        if r < 2 || k != r - 1 {
            return Err(Error::DimensionMismatch {
                what: "prototype slots per fact",
                expected: r.saturating_sub(1),
                found: k,
            });
        }
        if similarity_weight.dim() != (d, d) {
            return Err(Error::DimensionMismatch {
                what: "similarity weight",
                expected: d,
                found: similarity_weight.nrows(),
            });
        }
        Ok(Self {
            prototypes,
            similarity_weight,
        })
    }

    /// Normal(0, 0.02) prototypes; `W` = identity plus Normal(0, 0.02) noise.
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let prototypes = Array3::from_shape_fn((classes, classes.saturating_sub(1), dim), |_| {
            normal.sample(rng)
        });
        let w = Array2::from_shape_fn((dim, dim), |(a, b)| {
            let noise = normal.sample(rng);
            if a == b {
                1.0 + noise
            } else {
                noise
            }
        });
        Self::new(prototypes, w)
    }

    /// Bank whose prototype for `(i, j)` is the verbalizer direction
    /// `v_i − v_j`; used when selection is driven by the verbalizer.
    pub fn from_verbalizer(
        verbalizer: &Verbalizer,
        similarity_weight: Array2<f64>,
    ) -> Result<Self> {
        let r = verbalizer.num_classes();
        let d = verbalizer.dim();
        let index = PairIndex::new(r);
        let mut prototypes = Array3::zeros((r, r - 1, d));
        for (slot, (i, j)) in index.pairs().enumerate() {
            let u = &verbalizer.vector(i) - &verbalizer.vector(j);
            prototypes
                .slice_mut(ndarray::s![i, slot % (r - 1), ..])
                .assign(&u);
        }
        Self::new(prototypes, similarity_weight)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.dim().0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim().2
    }

    pub fn prototypes(&self) -> &Array3<f64> {
        &self.prototypes
    }

    pub fn similarity_weight(&self) -> ArrayView2<'_, f64> {
        self.similarity_weight.view()
    }

    pub fn prototype(&self, fact: usize, counterfact: usize) -> ArrayView1<'_, f64> {
        let k = PairIndex::new(self.num_classes()).position(fact, counterfact);
        self.prototypes.slice(ndarray::s![fact, k, ..])
    }

    /// Prototypes flattened to `R(R − 1) × d_e` in slot order.
    pub fn flat(&self) -> Array2<f64> {
        let (r, k, d) = self.prototypes.dim();
        self.prototypes
            .to_owned()
            .into_shape_with_order((r * k, d))
            .expect("contiguous")
    }

    fn check_against(&self, attrs: &ContrastiveAttributeTensor) -> Result<()> {
        if attrs.num_classes() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                what: "attribute classes vs prototype classes",
                expected: self.num_classes(),
                found: attrs.num_classes(),
            });
        }
        if attrs.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "attribute dim vs prototype dim",
                expected: self.dim(),
                found: attrs.dim(),
            });
        }
        Ok(())
    }
}

/// Bilinear score `⟨W · attribute, prototype⟩`.
pub fn similarity(
    attribute: ArrayView1<'_, f64>,
    prototype: ArrayView1<'_, f64>,
    w: ArrayView2<'_, f64>,
) -> Result<f64> {
    let d = w.nrows();
    if w.ncols() != attribute.len() {
        return Err(Error::DimensionMismatch {
            what: "similarity attribute",
            expected: w.ncols(),
            found: attribute.len(),
        });
    }
    if prototype.len() != d {
        return Err(Error::DimensionMismatch {
            what: "similarity prototype",
            expected: d,
            found: prototype.len(),
        });
    }
    Ok(w.dot(&attribute).dot(&prototype))
}

/// One selected attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedAttribute {
    pub fact: usize,
    pub counterfact: usize,
    #[serde(skip)]
    pub attribute: Array1<f64>,
    pub score: f64,
}

/// Top-m attributes in descending score order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<SelectedAttribute>,
}

impl SelectionResult {
    pub fn m(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// `(fact, counterfact)` of every entry, in order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.selected
            .iter()
            .map(|s| (s.fact, s.counterfact))
            .collect()
    }

    /// Attributes stacked as an `m × d_e` matrix.
    pub fn attribute_matrix(&self, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.selected.len(), dim));
        for (k, s) in self.selected.iter().enumerate() {
            out.row_mut(k).assign(&s.attribute);
        }
        out
    }
}

/// Score of every slot against its own aligned prototype, in slot order.
pub fn slot_scores(attrs: &ContrastiveAttributeTensor, bank: &PrototypeBank) -> Result<Vec<f64>> {
    bank.check_against(attrs)?;
    let w = bank.similarity_weight();
    attrs
        .pair_index()
        .pairs()
        .map(|(i, j)| similarity(attrs.attribute(i, j), bank.prototype(i, j), w))
        .collect()
}

/// Slot indices ordered by descending score, ties broken by ascending slot
/// (equivalently ascending `(fact, counterfact)`), truncated to `m`.
pub fn rank_slots(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::InvalidM {
            m,
            max: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order.truncate(m);
    Ok(order)
}

pub fn select_top_m(
    attrs: &ContrastiveAttributeTensor,
    bank: &PrototypeBank,
    m: usize,
) -> Result<SelectionResult> {
    let scores = slot_scores(attrs, bank)?;
    let index = attrs.pair_index();
    let selected = rank_slots(&scores, m)?
        .into_iter()
        .map(|slot| {
            let (fact, counterfact) = index.pair(slot);
            SelectedAttribute {
                fact,
                counterfact,
                attribute: attrs.attribute(fact, counterfact).to_owned(),
                score: scores[slot],
            }
        })
        .collect();
    Ok(SelectionResult { selected })
}

/// Which scores make up the softmax denominator of the prototype loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Denominator {
    /// Only the negative prototypes, as the loss is usually written.
    #[default]
    NegativesOnly,
    /// Negatives plus the positive itself (standard InfoNCE).
    WithPositive,
}

/// `−log(exp(s₊) / Σ exp(s₋))` for one positive slot.
pub fn contrastive_loss_from_scores(positive: f64, negatives: &[f64], denom: Denominator) -> f64 {
    let lse = match denom {
        Denominator::NegativesOnly => logsumexp(negatives.iter().copied()),
        Denominator::WithPositive => {
            logsumexp(negatives.iter().copied().chain(std::iter::once(positive)))
        }
    };
    lse - positive
}

/// Self-contrastive prototype loss with the negatives-only denominator.
pub fn contrastive_loss(
    attrs: &ContrastiveAttributeTensor,
    bank: &PrototypeBank,
    gold: usize,
) -> Result<f64> {
    contrastive_loss_with(attrs, bank, gold, Denominator::NegativesOnly)
}

/// Self-contrastive prototype loss.
///
/// Each positive attribute `c_{gold,j}` is scored against its own prototype
/// `p_{gold,j}` and against every prototype whose fact is not `gold`; the
/// per-slot losses are averaged over the `R − 1` positive slots.
pub fn contrastive_loss_with(
    attrs: &ContrastiveAttributeTensor,
    bank: &PrototypeBank,
    gold: usize,
    denom: Denominator,
) -> Result<f64> {
    bank.check_against(attrs)?;
    let r = attrs.num_classes();
    if gold >= r {
        return Err(Error::InvalidGold { gold, classes: r });
    }
    let index = attrs.pair_index();
    let w = bank.similarity_weight();
    let negatives: Vec<(usize, usize)> = index.pairs().filter(|&(i, _)| i != gold).collect();
    let mut total = 0.0;
    for k in 0..r - 1 {
        let j = index.counterfact(gold, k);
        let wc = w.dot(&attrs.attribute(gold, j));
        let pos = wc.dot(&bank.prototype(gold, j));
        let negs: Vec<f64> = negatives
            .iter()
            .map(|&(a, b)| wc.dot(&bank.prototype(a, b)))
            .collect();
        total += contrastive_loss_from_scores(pos, &negs, denom);
    }
    Ok(total / (r - 1) as f64)
}
