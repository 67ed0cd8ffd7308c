//! Classification, Siamese and cosine losses, each with a plain and a graph
//! form. The graph forms are what training differentiates.

use ndarray::{Array1, Array2, ArrayView1};

use crate::autodiff::{logsumexp, Graph, ParamStore, Var};
use crate::encoder::PredictorHead;
use crate::error::{Error, Result};

/// Mask-slot states of the two Siamese branches.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseOutputs {
    /// From the prompt with the selected attributes.
    pub z: Array1<f64>,
    /// From the prompt with every positive attribute of the gold fact.
    pub z_plus: Array1<f64>,
}

/// Unweighted loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_s: f64,
    pub l_con: f64,
    pub total: f64,
}

/// Per-term weights; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub siamese: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            siamese: 1.0,
            contrastive: 1.0,
        }
    }
}

impl LossBundle {
    pub fn new(l_cls: f64, l_s: f64, l_con: f64, weights: &LossWeights) -> Self {
        Self {
            l_cls,
            l_s,
            l_con,
            total: weights.cls * l_cls + weights.siamese * l_s + weights.contrastive * l_con,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_cls.is_finite()
            && self.l_s.is_finite()
            && self.l_con.is_finite()
            && self.total.is_finite()
    }
}

/// `−(a/‖a‖)·(b/‖b‖)`.
pub fn negative_cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "negative cosine",
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(-a.dot(&b) / (na * nb))
}

pub fn negative_cosine_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.norm(a);
    let nb = g.norm(b);
    if g.scalar(na) == 0.0 || g.scalar(nb) == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot = g.dot(a, b);
    let denom = g.mul(na, nb);
    let cos = g.div_scalar(dot, denom);
    Ok(g.neg(cos))
}

/// `½·D(f(z), sg(z₊)) + ½·D(f(z₊), sg(z))` on a graph.
///
/// The two `stop_gradient` calls happen in the order `z₊`, then `z`.
pub fn siamese_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    predictor: &PredictorHead,
    z: Var,
    z_plus: Var,
) -> Result<Var> {
    let fz = predictor.forward(g, store, z);
    let target_plus = g.stop_gradient(z_plus);
    let d1 = negative_cosine_graph(g, fz, target_plus)?;

    let fz_plus = predictor.forward(g, store, z_plus);
    let target = g.stop_gradient(z);
    let d2 = negative_cosine_graph(g, fz_plus, target)?;

    let sum = g.add(d1, d2);
    Ok(g.scale(sum, 0.5))
}

pub fn siamese_loss(
    out: &SiameseOutputs,
    predictor: &PredictorHead,
    store: &ParamStore,
) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(row(&out.z));
    let zp = g.constant(row(&out.z_plus));
    let l = siamese_loss_graph(&mut g, store, predictor, z, zp)?;
    Ok(g.scalar(l))
}

fn row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}

/// `−log softmax(logits)[gold]`, via log-sum-exp.
pub fn classification_loss(logits: ArrayView1<'_, f64>, gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::InvalidGold {
            gold,
            classes: logits.len(),
        });
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericFailure("logits".into()));
    }
    Ok(logsumexp(logits.iter().copied()) - logits[gold])
}

/// Mean of [`classification_loss`] over a batch.
pub fn classification_loss_batch(batch: &[(Array1<f64>, usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (logits, gold) in batch {
        sum += classification_loss(logits.view(), *gold)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Graph version of [`classification_loss`] for a `1 × R` logits row.
pub fn classification_loss_graph(g: &mut Graph, logits: Var, gold: usize) -> Result<Var> {
    let classes = g.shape(logits).1;
    if gold >= classes {
        return Err(Error::InvalidGold { gold, classes });
    }
    let lse = g.logsumexp(logits);
    let picked = g.element(logits, 0, gold);
    Ok(g.sub(lse, picked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn negative_cosine_examples() {
        let a = array![0.3, -2.0, 1.0];
        assert!((negative_cosine(a.view(), a.view()).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            negative_cosine(array![1.0, 0.0].view(), array![0.0, 3.0].view()).unwrap(),
            0.0
        );
        let v = negative_cosine(array![1.0, 0.0].view(), array![1.0, 1.0].view()).unwrap();
        assert!((v + 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            negative_cosine(array![0.0, 0.0].view(), array![1.0, 1.0].view()),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn siamese_loss_with_identity_predictor() {
        let store = ParamStore::new();
        let same = SiameseOutputs {
            z: array![0.5, 1.5, -2.0],
            z_plus: array![0.5, 1.5, -2.0],
        };
        let l = siamese_loss(&same, &PredictorHead::Identity, &store).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
        let orth = SiameseOutputs {
            z: array![1.0, 0.0],
            z_plus: array![0.0, 2.0],
        };
        assert_eq!(
            siamese_loss(&orth, &PredictorHead::Identity, &store).unwrap(),
            0.0
        );
        let zero = SiameseOutputs {
            z: array![0.0, 0.0],
            z_plus: array![0.0, 2.0],
        };
        assert!(matches!(
            siamese_loss(&zero, &PredictorHead::Identity, &store),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn classification_loss_examples() {
        let uniform = array![0.3, 0.3, 0.3, 0.3];
        assert!((classification_loss(uniform.view(), 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let dominated = array![100.0, 0.0, 0.0];
        assert!(classification_loss(dominated.view(), 0).unwrap() < 1e-40);
        assert!(matches!(
            classification_loss(uniform.view(), 4),
            Err(Error::InvalidGold {
                gold: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn classification_loss_matches_explicit_softmax() {
        let logits = array![0.7, -1.3, 2.2, 0.05, -0.4];
        let exps: Vec<f64> = logits.iter().map(|x: &f64| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        for gold in 0..5 {
            let oracle = -(exps[gold] / total).ln();
            let got = classification_loss(logits.view(), gold).unwrap();
            assert!((got - oracle).abs() < 1e-10);
        }
        let batch = vec![(logits.clone(), 0), (logits.clone(), 2)];
        let mean = classification_loss_batch(&batch).unwrap();
        let expect = (-(exps[0] / total).ln() - (exps[2] / total).ln()) / 2.0;
        assert!((mean - expect).abs() < 1e-10);
    }

    #[test]
    fn bundle_total_is_sum() {
        let b = LossBundle::new(0.25, -0.5, 1.125, &LossWeights::default());
        assert_eq!(b.total, 0.25 + -0.5 + 1.125);
    }
}
