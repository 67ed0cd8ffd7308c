//! Reverse-mode automatic differentiation over small dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] and enter the graph as leaves; [`Graph::backward`] returns
//! the gradient of a scalar node with respect to every node, and
//! [`Gradients::params`] folds those into per-parameter gradients.
//!
//! Row vectors are represented as `1 × n` matrices and scalars as `1 × 1`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics if the name is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Vector-Jacobian product supplied by an opaque, externally computed op.
pub trait Vjp: Send + Sync {
    /// Returns the gradient with respect to `input`, or `None` when the op
    /// does not propagate gradients.
    fn vjp(&self, input: &Array2<f64>, grad_out: &Array2<f64>) -> Option<Array2<f64>>;
}

#[derive(Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Relu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    SumAll(Var),
    RowSums(Var),
    Concat(Vec<Var>),
    Rows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Element(Var, usize, usize),
    Norm(Var),
    LogSumExp(Var),
    Custom(Var, Arc<dyn Vjp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(v, _) => write!(f, "Custom({v:?})"),
            Op::Constant => write!(f, "Constant"),
            Op::Param(p) => write!(f, "Param({p:?})"),
            Op::Input => write!(f, "Input"),
            _ => write!(f, "Op"),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: Option<Vec<Array2<f64>>>,
    stopped: Vec<Array2<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose `stop_gradient` calls return the given values, in call
    /// order, instead of their live arguments. Used to evaluate a loss with
    /// its stop-gradient targets held fixed.
    pub fn with_frozen_targets(values: Vec<Array2<f64>>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by every `stop_gradient` call so far, in call order.
    pub fn stopped_values(&self) -> &[Array2<f64>] {
        &self.stopped
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stopped.len();
        let value = match &self.frozen {
            Some(vals) => vals
                .get(k)
                .cloned()
                .unwrap_or_else(|| self.nodes[x.0].value.clone()),
            None => self.nodes[x.0].value.clone(),
        };
        self.stopped.push(value.clone());
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row expects a 1 x n row");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a * s` where `s` is a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::MulScalar(a, s))
    }

    /// `a / s` where `s` is a `1 × 1` node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) / k;
        self.push(v, Op::DivScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Mean over rows, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols();
        let v = x
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .into_shape_with_order((1, n))
            .expect("row shape");
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Per-row sums as an `r × 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let r = x.nrows();
        let v = x.sum_axis(Axis(1)).into_shape_with_order((r, 1)).unwrap();
        self.push(v, Op::RowSums(a))
    }

    /// Inner product of two equally shaped nodes, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Stacks nodes with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.ncols(), cols, "concat column mismatch");
            v.slice_mut(s![at..at + x.nrows(), ..]).assign(x);
            at += x.nrows();
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start + len` of `a`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::Rows(a, start, len))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.rows(a, i, 1)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((idx.len(), t.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(k).assign(&t.row(i));
        }
        self.push(v, Op::Gather(table, idx.to_vec()))
    }

    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a)[[r, c]]);
        self.push(v, Op::Element(a, r, c))
    }

    /// Frobenius norm as a scalar node.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Array2::from_elem((1, 1), n), Op::Norm(a))
    }

    /// Numerically stable `log Σ exp` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = logsumexp(self.value(a).iter().copied());
        self.push(Array2::from_elem((1, 1), v), Op::LogSumExp(a))
    }

    /// An op computed outside the graph. `value` is the forward result of
    /// applying the op to `input`; `vjp` supplies the backward rule.
    pub fn custom(&mut self, input: Var, value: Array2<f64>, vjp: Arc<dyn Vjp>) -> Var {
        self.push(value, Op::Custom(input, vjp))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param(_) | Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let n = g.ncols();
                    let db = g.sum_axis(Axis(0)).into_shape_with_order((1, n)).unwrap();
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::MulScalar(a, sc) => {
                    let k = self.scalar(*sc);
                    let ds = (&g * self.value(*a)).sum();
                    accumulate(&mut grads, *a, &g * k);
                    accumulate(&mut grads, *sc, Array2::from_elem((1, 1), ds));
                }
                Op::DivScalar(a, sc) => {
                    let k = self.scalar(*sc);
                    let ds = -(&g * self.value(*a)).sum() / (k * k);
                    accumulate(&mut grads, *a, &g / k);
                    accumulate(&mut grads, *sc, Array2::from_elem((1, 1), ds));
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gy: f64 = (&g.row(r) * &y.row(r)).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - gy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Array2::zeros((r, c));
                    for mut row in da.rows_mut() {
                        row.assign(&(&g.row(0) / r as f64));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSums(a) => {
                    let (r, c) = self.shape(*a);
                    let da = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        let dp = g.slice(s![at..at + rows, ..]).to_owned();
                        accumulate(&mut grads, *p, dp);
                        at += rows;
                    }
                }
                Op::Rows(a, start, len) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(t, idx) => {
                    let mut dt = Array2::zeros(self.shape(*t));
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = dt.row_mut(i);
                        row += &g.row(k);
                    }
                    accumulate(&mut grads, *t, dt);
                }
                Op::Element(a, r, c) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da[[*r, *c]] = g[[0, 0]];
                    accumulate(&mut grads, *a, da);
                }
                Op::Norm(a) => {
                    let n = node.value[[0, 0]];
                    let da = if n > 0.0 {
                        self.value(*a) * (g[[0, 0]] / n)
                    } else {
                        Array2::zeros(self.shape(*a))
                    };
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSumExp(a) => {
                    let lse = node.value[[0, 0]];
                    let da = self.value(*a).mapv(|x| (x - lse).exp() * g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::Custom(a, vjp) => {
                    if let Some(da) = vjp.vjp(self.value(*a), &g) {
                        accumulate(&mut grads, *a, da);
                    }
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// Stable `log Σ exp(x)`. Returns `-inf` for an empty input.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max.is_infinite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients folded per parameter; parameters that entered the graph
    /// several times have their contributions summed.
    pub fn params(&self) -> BTreeMap<ParamId, Array2<f64>> {
        let mut out: BTreeMap<ParamId, Array2<f64>> = BTreeMap::new();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.entry(id)
                    .and_modify(|acc| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        out
    }
}
