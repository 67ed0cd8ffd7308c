//! Fact/counterfact contrastive subspaces and instance projections.
//!
//! For a verbalizer with rows `v_0 … v_{R-1}`, each ordered pair `(i, j)` with
//! `i ≠ j` spans the direction `u_ij = v_i − v_j`. Projecting an instance
//! representation `h` onto that line gives the contrastive attribute
//! `c_ij = (⟨h, u⟩ / ⟨u, u⟩) · u`. Since the projector `u uᵀ / uᵀu` is
//! unchanged by `u → −u`, `c_ij == c_ji`.
//!
//! Attributes are laid out in `R × (R − 1)` slots: slot `(i, k)` holds the
//! pair `(i, j)` for the `k`-th class `j ≠ i` in ascending order.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Subspaces with `‖u‖ ≤ DEGENERATE_EPS` are flagged degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Trainable label vectors, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    vectors: Array2<f64>,
    label_names: Vec<String>,
}

impl Verbalizer {
    pub fn new(vectors: Array2<f64>, label_names: Vec<String>) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(Error::DimensionMismatch {
                what: "verbalizer classes (need at least 2)",
                expected: 2,
                found: vectors.nrows(),
            });
        }
        if label_names.len() != vectors.nrows() {
            return Err(Error::DimensionMismatch {
                what: "verbalizer label names",
                expected: vectors.nrows(),
                found: label_names.len(),
            });
        }
        if !vectors.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericFailure("verbalizer".into()));
        }
        Ok(Self {
            vectors,
            label_names,
        })
    }

    /// Verbalizer with i.i.d. normal entries.
    pub fn random<R: Rng + ?Sized>(
        label_names: Vec<String>,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).expect("valid std");
        let vectors = Array2::from_shape_fn((label_names.len(), dim), |_| normal.sample(rng));
        Self::new(vectors, label_names)
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vector(&self, class: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(class)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    fn check_class(&self, index: usize) -> Result<()> {
        if index >= self.num_classes() {
            return Err(Error::IndexOutOfRange {
                index,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

/// The direction `u_ij = v_i − v_j` between a fact and a counterfact.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSubspace {
    pub fact: usize,
    pub counterfact: usize,
    pub direction: Array1<f64>,
    pub degenerate: bool,
}

/// Mean-pooled sentence representation `h_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRepresentation {
    h: Array1<f64>,
    source_length: usize,
}

impl InstanceRepresentation {
    pub fn new(h: Array1<f64>, source_length: usize) -> Result<Self> {
        if source_length == 0 {
            return Err(Error::EmptySequence);
        }
        if !h.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericFailure("instance representation".into()));
        }
        Ok(Self { h, source_length })
    }

    pub fn vector(&self) -> ArrayView1<'_, f64> {
        self.h.view()
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }
}

/// Maps attribute slots to `(fact, counterfact)` pairs for `R` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    classes: usize,
}

impl PairIndex {
    pub fn new(classes: usize) -> Self {
        Self { classes }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `R · (R − 1)`.
    pub fn num_slots(&self) -> usize {
        self.classes * self.classes.saturating_sub(1)
    }

    /// Position `k` of counterfact `j` within fact `i`'s block.
    pub fn position(&self, fact: usize, counterfact: usize) -> usize {
        debug_assert_ne!(fact, counterfact);
        if counterfact < fact {
            counterfact
        } else {
            counterfact - 1
        }
    }

    /// Counterfact at position `k` of fact `i`'s block.
    pub fn counterfact(&self, fact: usize, k: usize) -> usize {
        if k < fact {
            k
        } else {
            k + 1
        }
    }

    /// Flat slot index of `(fact, counterfact)`.
    pub fn slot(&self, fact: usize, counterfact: usize) -> usize {
        fact * (self.classes - 1) + self.position(fact, counterfact)
    }

    /// `(fact, counterfact)` at a flat slot index.
    pub fn pair(&self, slot: usize) -> (usize, usize) {
        let fact = slot / (self.classes - 1);
        (fact, self.counterfact(fact, slot % (self.classes - 1)))
    }

    /// All pairs in slot order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_slots()).map(move |s| self.pair(s))
    }
}

/// All contrastive attributes of one instance, shape `R × (R − 1) × d_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveAttributeTensor {
    values: Array3<f64>,
    degenerate: Vec<(usize, usize)>,
}

impl ContrastiveAttributeTensor {
    pub fn from_values(values: Array3<f64>) -> Self {
        Self {
            values,
            degenerate: Vec::new(),
        }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn pair_index(&self) -> PairIndex {
        PairIndex::new(self.num_classes())
    }

    pub fn attribute(&self, fact: usize, counterfact: usize) -> ArrayView1<'_, f64> {
        let k = self.pair_index().position(fact, counterfact);
        self.values.slice(ndarray::s![fact, k, ..])
    }

    /// Attributes flattened to `R(R − 1) × d_e` in slot order.
    pub fn flat(&self) -> Array2<f64> {
        let (r, k, d) = self.values.dim();
        self.values
            .to_owned()
            .into_shape_with_order((r * k, d))
            .expect("contiguous")
    }

    /// Pairs whose subspace was degenerate; their attributes are zero.
    pub fn degenerate_pairs(&self) -> &[(usize, usize)] {
        &self.degenerate
    }
}

pub fn build_subspace(
    verbalizer: &Verbalizer,
    fact: usize,
    counterfact: usize,
) -> Result<ContrastiveSubspace> {
    verbalizer.check_class(fact)?;
    verbalizer.check_class(counterfact)?;
    if fact == counterfact {
        return Err(Error::IdenticalPair(fact));
    }
    let direction = &verbalizer.vector(fact) - &verbalizer.vector(counterfact);
    let degenerate = direction.dot(&direction).sqrt() <= DEGENERATE_EPS;
    Ok(ContrastiveSubspace {
        fact,
        counterfact,
        direction,
        degenerate,
    })
}

/// Orthogonal projection of `h` onto the line spanned by the subspace.
pub fn project(h: ArrayView1<'_, f64>, subspace: &ContrastiveSubspace) -> Result<Array1<f64>> {
    if subspace.degenerate {
        return Err(Error::DegenerateSubspace {
            fact: subspace.fact,
            counterfact: subspace.counterfact,
        });
    }
    let u = &subspace.direction;
    if h.len() != u.len() {
        return Err(Error::DimensionMismatch {
            what: "projection",
            expected: u.len(),
            found: h.len(),
        });
    }
    let alpha = h.dot(u) / u.dot(u);
    Ok(u * alpha)
}

pub fn construct_all_attributes(
    verbalizer: &Verbalizer,
    h: &InstanceRepresentation,
) -> Result<ContrastiveAttributeTensor> {
    let r = verbalizer.num_classes();
    let d = verbalizer.dim();
    if h.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "instance representation",
            expected: d,
            found: h.dim(),
        });
    }
    let index = PairIndex::new(r);
    let mut values = Array3::zeros((r, r - 1, d));
    let mut degenerate = Vec::new();
    for (slot, (i, j)) in index.pairs().enumerate() {
        let subspace = build_subspace(verbalizer, i, j)?;
        if subspace.degenerate {
            log::warn!("degenerate contrastive subspace ({i}, {j}); attribute set to zero");
            degenerate.push((i, j));
            continue;
        }
        let c = project(h.vector(), &subspace)?;
        values
            .slice_mut(ndarray::s![i, slot % (r - 1), ..])
            .assign(&c);
    }
    Ok(ContrastiveAttributeTensor { values, degenerate })
}

/// [`construct_all_attributes`] over a batch of instances.
pub fn construct_batch(
    verbalizer: &Verbalizer,
    batch: &[InstanceRepresentation],
) -> Result<Vec<ContrastiveAttributeTensor>> {
    batch
        .iter()
        .map(|h| construct_all_attributes(verbalizer, h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn verb(rows: Array2<f64>) -> Verbalizer {
        let names = (0..rows.nrows()).map(|i| format!("c{i}")).collect();
        Verbalizer::new(rows, names).unwrap()
    }

    #[test]
    fn subspace_is_row_difference() {
        let v = verb(array![[1.0, 0.0], [0.0, 1.0]]);
        let s = build_subspace(&v, 0, 1).unwrap();
        assert_eq!(s.direction, array![1.0, -1.0]);
        assert!(!s.degenerate);
    }

    #[test]
    fn duplicated_rows_are_degenerate() {
        let v = verb(array![[0.3, 0.4], [0.3, 0.4], [1.0, 0.0]]);
        assert!(build_subspace(&v, 0, 1).unwrap().degenerate);
        let h = InstanceRepresentation::new(array![1.0, 2.0], 1).unwrap();
        let s = build_subspace(&v, 1, 0).unwrap();
        assert!(matches!(
            project(h.vector(), &s),
            Err(Error::DegenerateSubspace { .. })
        ));
        let attrs = construct_all_attributes(&v, &h).unwrap();
        assert_eq!(attrs.degenerate_pairs(), &[(0, 1), (1, 0)]);
        assert!(attrs.attribute(0, 1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn subspace_errors() {
        let v = verb(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            build_subspace(&v, 0, 2),
            Err(Error::IndexOutOfRange { index: 2, .. })
        ));
        assert!(matches!(
            build_subspace(&v, 1, 1),
            Err(Error::IdenticalPair(1))
        ));
    }

    #[test]
    fn subspace_matches_elementwise_loop() {
        let v = verb(array![
            [0.12, -0.7, 1.3, 0.05],
            [-0.44, 0.9, 0.2, -1.1],
            [0.0, 0.1, 0.2, 0.3]
        ]);
        let s = build_subspace(&v, 0, 1).unwrap();
        let rows = v.vectors();
        for k in 0..4 {
            assert_eq!(s.direction[k], rows[[0, k]] - rows[[1, k]]);
        }
    }

    fn sub(u: Array1<f64>) -> ContrastiveSubspace {
        ContrastiveSubspace {
            fact: 0,
            counterfact: 1,
            direction: u,
            degenerate: false,
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            project(array![2.0, 0.0].view(), &sub(array![1.0, 0.0])).unwrap(),
            array![2.0, 0.0]
        );
        assert_eq!(
            project(array![1.0, 1.0].view(), &sub(array![1.0, -1.0])).unwrap(),
            array![0.0, 0.0]
        );
        // <h,u>/<u,u> = 4/2 = 2
        assert_eq!(
            project(array![3.0, 1.0].view(), &sub(array![1.0, 1.0])).unwrap(),
            array![2.0, 2.0]
        );
        assert!(matches!(
            project(array![1.0].view(), &sub(array![1.0, 1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn attribute_tensor_shapes() {
        let v = verb(Array2::from_shape_fn((3, 2), |(i, j)| {
            (i * 2 + j) as f64 * 0.7 - 1.0
        }));
        let h = InstanceRepresentation::new(array![0.5, -0.25], 3).unwrap();
        assert_eq!(
            construct_all_attributes(&v, &h).unwrap().values().dim(),
            (3, 2, 2)
        );

        let v42 = verb(Array2::from_shape_fn((42, 3), |(i, j)| {
            ((i * 7 + j * 13) % 17) as f64 * 0.1 + i as f64
        }));
        let h3 = InstanceRepresentation::new(array![1.0, 0.5, -0.5], 4).unwrap();
        let attrs = construct_all_attributes(&v42, &h3).unwrap();
        assert_eq!(attrs.flat().nrows(), 1722);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let v = verb(array![[1.0, 0.0], [0.0, 1.0]]);
        let h = InstanceRepresentation::new(array![1.0, 2.0, 3.0], 1).unwrap();
        assert!(matches!(
            construct_all_attributes(&v, &h),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pair_index_round_trips() {
        for r in 2..7 {
            let idx = PairIndex::new(r);
            for slot in 0..idx.num_slots() {
                let (i, j) = idx.pair(slot);
                assert_ne!(i, j);
                assert_eq!(idx.slot(i, j), slot);
            }
            // Ascending counterfacts inside each fact block.
            let pairs: Vec<_> = idx.pairs().collect();
            for w in pairs.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, d)
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_non_expansive(
            (h, u) in (1usize..10).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))
        ) {
            let u = Array1::from(u);
            prop_assume!(u.dot(&u).sqrt() > 1e-3);
            let s = sub(u);
            let h = Array1::from(h);
            let p = project(h.view(), &s).unwrap();
            let pp = project(p.view(), &s).unwrap();
            let scale = p.dot(&p).sqrt().max(1e-12);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() <= 1e-6 * scale);
            }
            prop_assert!(p.dot(&p).sqrt() <= h.dot(&h).sqrt() * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn attributes_are_symmetric_and_on_their_line(
            (rows, h) in (2usize..6, 1usize..6).prop_flat_map(|(r, d)| {
                (prop::collection::vec(vec_strategy(d), r), vec_strategy(d))
            })
        ) {
            let r = rows.len();
            let d = h.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let v = verb(Array2::from_shape_vec((r, d), flat).unwrap());
            let h = InstanceRepresentation::new(Array1::from(h), 2).unwrap();
            let attrs = construct_all_attributes(&v, &h).unwrap();
            prop_assert_eq!(attrs.flat().nrows(), r * (r - 1));
            for i in 0..r {
                for j in 0..r {
                    if i == j { continue; }
                    let a = attrs.attribute(i, j);
                    let b = attrs.attribute(j, i);
                    for (x, y) in a.iter().zip(b.iter()) {
                        prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
                    }
                    let s = build_subspace(&v, i, j).unwrap();
                    if s.degenerate { continue; }
                    let u = &s.direction;
                    let alpha = a.dot(u) / u.dot(u);
                    let resid = (&a - &(u * alpha)).dot(&(&a - &(u * alpha))).sqrt();
                    prop_assert!(resid <= 1e-6 * a.dot(&a).sqrt() + 1e-12);
                }
            }
        }
    }
}
