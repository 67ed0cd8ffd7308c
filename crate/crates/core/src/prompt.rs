//! Prompt assembly and mask-slot class scoring.
//!
//! A prompt is the embedded instance, then the selected attribute vectors
//! in descending score order, then the template tokens, then the mask:
//!
//! ```text
//! e_1 … e_l | c_1 … c_m | e_t1 … e_tn | e_[MASK]
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::autodiff::{Graph, Var};
use crate::contrastive::Verbalizer;
use crate::error::{Error, Result};
use crate::prototype::SelectionResult;

/// Segment lengths of an assembled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub instance: usize,
    pub attributes: usize,
    pub template: usize,
}

impl PromptLayout {
    /// `l + m + n + 1`.
    pub fn len(&self) -> usize {
        self.instance + self.attributes + self.template + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mask_position(&self) -> usize {
        self.len() - 1
    }

    pub fn check(&self, max_length: usize) -> Result<()> {
        if self.len() > max_length {
            return Err(Error::LengthOverflow {
                length: self.len(),
                max: max_length,
            });
        }
        Ok(())
    }
}

/// An assembled, embedded prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput {
    pub embedded: Array2<f64>,
    pub layout: PromptLayout,
}

impl PromptInput {
    pub fn mask_position(&self) -> usize {
        self.layout.mask_position()
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Builds `T(X, C)` from plain matrices.
pub fn assemble_prompt(
    instance: ArrayView2<'_, f64>,
    selected: &SelectionResult,
    template: ArrayView2<'_, f64>,
    mask: ArrayView1<'_, f64>,
    max_length: usize,
) -> Result<PromptInput> {
    let d = instance.ncols();
    if template.ncols() != d && template.nrows() > 0 {
        return Err(Error::DimensionMismatch {
            what: "template tokens",
            expected: d,
            found: template.ncols(),
        });
    }
    if mask.len() != d {
        return Err(Error::DimensionMismatch {
            what: "mask embedding",
            expected: d,
            found: mask.len(),
        });
    }
    if let Some(bad) = selected.selected.iter().find(|a| a.attribute.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "selected attribute",
            expected: d,
            found: bad.attribute.len(),
        });
    }
    let layout = PromptLayout {
        instance: instance.nrows(),
        attributes: selected.m(),
        template: template.nrows(),
    };
    layout.check(max_length)?;
    let mut embedded = Array2::zeros((layout.len(), d));
    let (l, m, n) = (layout.instance, layout.attributes, layout.template);
    embedded.slice_mut(s![..l, ..]).assign(&instance);
    for (k, a) in selected.selected.iter().enumerate() {
        embedded.row_mut(l + k).assign(&a.attribute);
    }
    if n > 0 {
        embedded
            .slice_mut(s![l + m..l + m + n, ..])
            .assign(&template);
    }
    embedded.row_mut(l + m + n).assign(&mask);
    Ok(PromptInput { embedded, layout })
}

/// Graph version of [`assemble_prompt`]; `attributes` is `m × d_e` or `None`
/// for an attribute-free prompt, `template` is `n × d_e` or `None`.
pub fn assemble_prompt_graph(
    g: &mut Graph,
    instance: Var,
    attributes: Option<Var>,
    template: Option<Var>,
    mask: Var,
    max_length: usize,
) -> Result<(Var, PromptLayout)> {
    let layout = PromptLayout {
        instance: g.shape(instance).0,
        attributes: attributes.map_or(0, |a| g.shape(a).0),
        template: template.map_or(0, |t| g.shape(t).0),
    };
    layout.check(max_length)?;
    let parts: Vec<Var> = [Some(instance), attributes, template, Some(mask)]
        .into_iter()
        .flatten()
        .collect();
    Ok((g.concat_rows(&parts), layout))
}

/// Soft-verbalizer scores `⟨z, v_r⟩` for every class.
pub fn mask_class_logits(z: ArrayView1<'_, f64>, verbalizer: &Verbalizer) -> Result<Array1<f64>> {
    if z.len() != verbalizer.dim() {
        return Err(Error::DimensionMismatch {
            what: "mask state",
            expected: verbalizer.dim(),
            found: z.len(),
        });
    }
    Ok(verbalizer.vectors().dot(&z))
}

/// Graph version of [`mask_class_logits`]: `z` is `1 × d_e`, `verbalizer`
/// is `R × d_e`; returns `1 × R`.
pub fn mask_class_logits_graph(g: &mut Graph, z: Var, verbalizer: Var) -> Var {
    let vt = g.transpose(verbalizer);
    g.matmul(z, vt)
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in scores.iter().enumerate() {
        if x > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::SelectedAttribute;
    use ndarray::array;
    use proptest::prelude::*;

    fn selection(rows: &[[f64; 2]]) -> SelectionResult {
        SelectionResult {
            selected: rows
                .iter()
                .enumerate()
                .map(|(k, r)| SelectedAttribute {
                    fact: 0,
                    counterfact: k + 1,
                    attribute: Array1::from(r.to_vec()),
                    score: -(k as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn length_law_example() {
        let inst = Array2::from_elem((3, 2), 1.0);
        let tpl = Array2::from_elem((2, 2), 2.0);
        let p = assemble_prompt(
            inst.view(),
            &selection(&[[5.0, 5.0], [6.0, 6.0]]),
            tpl.view(),
            array![9.0, 9.0].view(),
            128,
        )
        .unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.mask_position(), 7);
        assert_eq!(p.embedded.row(3), array![5.0, 5.0]);
        assert_eq!(p.embedded.row(4), array![6.0, 6.0]);
        assert_eq!(p.embedded.row(5), array![2.0, 2.0]);
        assert_eq!(p.embedded.row(7), array![9.0, 9.0]);
    }

    #[test]
    fn empty_selection_is_plain_template() {
        let inst = Array2::from_elem((3, 2), 1.0);
        let tpl = Array2::from_elem((2, 2), 2.0);
        let mask = array![9.0, 9.0];
        let p = assemble_prompt(
            inst.view(),
            &SelectionResult::default(),
            tpl.view(),
            mask.view(),
            128,
        )
        .unwrap();
        let mut plain = Array2::zeros((6, 2));
        plain.slice_mut(s![..3, ..]).fill(1.0);
        plain.slice_mut(s![3..5, ..]).fill(2.0);
        plain.row_mut(5).assign(&mask);
        assert_eq!(p.embedded, plain);
    }

    #[test]
    fn swapping_attributes_touches_exactly_their_positions() {
        let inst = Array2::from_elem((3, 2), 1.0);
        let tpl = Array2::from_elem((2, 2), 2.0);
        let mask = array![9.0, 9.0];
        let rows = [[5.0, 4.0], [6.0, 3.0], [7.0, 2.0]];
        let a =
            assemble_prompt(inst.view(), &selection(&rows), tpl.view(), mask.view(), 128).unwrap();
        let swapped = [rows[2], rows[1], rows[0]];
        let b = assemble_prompt(
            inst.view(),
            &selection(&swapped),
            tpl.view(),
            mask.view(),
            128,
        )
        .unwrap();
        let diff: Vec<usize> = (0..a.len())
            .filter(|&i| a.embedded.row(i) != b.embedded.row(i))
            .collect();
        assert_eq!(diff, vec![3, 5]);
    }

    #[test]
    fn overflow_is_reported() {
        let inst = Array2::from_elem((5, 2), 1.0);
        let tpl = Array2::from_elem((2, 2), 2.0);
        let err = assemble_prompt(
            inst.view(),
            &selection(&[[1.0, 1.0]]),
            tpl.view(),
            array![0.0, 0.0].view(),
            8,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LengthOverflow { length: 9, max: 8 }));
    }

    fn verb(rows: Array2<f64>) -> Verbalizer {
        let names = (0..rows.nrows()).map(|i| format!("c{i}")).collect();
        Verbalizer::new(rows, names).unwrap()
    }

    #[test]
    fn logits_examples() {
        let v = verb(Array2::eye(4));
        let z = v.vector(2).to_owned();
        assert_eq!(argmax(mask_class_logits(z.view(), &v).unwrap().view()), 2);
        let zero = Array1::zeros(4);
        assert!(mask_class_logits(zero.view(), &v)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));

        let v = verb(array![
            [0.3, -1.0, 0.2],
            [1.1, 0.4, -0.7],
            [-0.5, 0.9, 0.8],
            [0.0, 0.25, -1.5]
        ]);
        let z = array![0.7, -0.3, 1.9];
        let got = mask_class_logits(z.view(), &v).unwrap();
        for r in 0..4 {
            let mut oracle = 0.0;
            for k in 0..3 {
                oracle += z[k] * v.vectors()[[r, k]];
            }
            assert!((got[r] - oracle).abs() < 1e-10);
        }
        assert!(mask_class_logits(array![1.0].view(), &v).is_err());
    }

    proptest! {
        #[test]
        fn length_law_holds(l in 1usize..20, m in 0usize..10, n in 0usize..6) {
            let inst = Array2::zeros((l, 2));
            let tpl = Array2::zeros((n, 2));
            let rows = vec![[0.5, 0.5]; m];
            let r = assemble_prompt(inst.view(), &selection(&rows), tpl.view(), array![0.0, 0.0].view(), 32);
            if l + m + n < 32 {
                let p = r.unwrap();
                prop_assert_eq!(p.len(), l + m + n + 1);
                prop_assert_eq!(p.mask_position(), l + m + n);
            } else {
                let overflow = matches!(r, Err(Error::LengthOverflow { .. }));
                prop_assert!(overflow);
            }
        }

        #[test]
        fn positive_scaling_keeps_argmax(
            z in prop::collection::vec(-3.0f64..3.0, 3),
            alpha in 1e-3f64..1e3,
        ) {
            let v = verb(array![[0.3, -1.0, 0.2], [1.1, 0.4, -0.7], [-0.5, 0.9, 0.8]]);
            let z = Array1::from(z);
            let a = argmax(mask_class_logits(z.view(), &v).unwrap().view());
            let scaled = &z * alpha;
            let b = argmax(mask_class_logits(scaled.view(), &v).unwrap().view());
            prop_assert_eq!(a, b);
        }
    }
}
