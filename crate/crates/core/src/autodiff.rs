//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are
//! created with [`Tape::param`] (differentiable) or [`Tape::constant`];
//! [`Tape::backward`] then walks the records once in reverse and returns
//! the gradient of a scalar loss for every parameter leaf.
//!
//! The operator set is deliberately small: it is what an MLP with softmax
//! and sigmoid heads, cross-entropy losses, per-row attention weights and a
//! gradient-reversal layer needs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    BinaryCrossEntropy {
        pred: Var,
        targets: Tensor,
        weights: Tensor,
    },
    GradReverse(Var, f64),
    ScaleRows(Var, Var),
    Column(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: bool,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss keyed by parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Gradient for `v`; panics if `v` is not a parameter of the tape.
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.grads[&v]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    /// Number of tape records processed by the reverse sweep.
    pub fn records_visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].param
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
            needs_grad: param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `x` into a new constant (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds the `1 × cols` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Elementwise sum of two equally shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "add",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Multiplies every entry by the constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::contract("softmax_rows needs at least one column"));
        }
        let out = softmax_rows(xv);
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Mean over rows of `-ln(probs[row, label])`, probabilities clamped
    /// below at [`PROB_EPS`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: pv.shape(),
                right: (labels.len(), 1),
            });
        }
        if pv.rows() == 0 {
            return Err(Error::contract("cross_entropy over zero rows"));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= pv.cols() {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: label,
                    bound: pv.cols(),
                });
            }
            total -= pv.get(r, label).max(PROB_EPS).ln();
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    /// `Σ_i w_i · BCE(p_i, t_i) / n` with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`. Targets and weights are constants.
    pub fn binary_cross_entropy(
        &mut self,
        pred: Var,
        targets: &Tensor,
        sample_weight: &Tensor,
    ) -> Result<Var> {
        let pv = self.value(pred);
        for other in [targets, sample_weight] {
            if pv.cols() != 1 || other.shape() != pv.shape() {
                return Err(Error::Dimension {
                    op: "binary_cross_entropy",
                    left: pv.shape(),
                    right: other.shape(),
                });
            }
        }
        let n = pv.rows();
        if n == 0 {
            return Err(Error::contract("binary_cross_entropy over zero rows"));
        }
        let mut total = 0.0;
        for i in 0..n {
            let w = sample_weight.data()[i];
            if w == 0.0 {
                continue;
            }
            let p = clamp_prob(pv.data()[i]);
            let t = targets.data()[i];
            total -= w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        let loss = total / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                pred,
                targets: targets.clone(),
                weights: sample_weight.clone(),
            },
            &[pred],
        ))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::contract(format!(
                "grad_reverse lambda must be >= 0, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        Ok(self.push(out, Op::GradReverse(x, lambda), &[x]))
    }

    /// Scales row `i` of `x` by `weights[i]`. `weights` is `n × 1`.
    ///
    /// Gradient reaches `weights` only when it is differentiable; pass a
    /// [`Tape::detach`]ed node or a constant to keep it fixed.
    pub fn scale_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        if wv.cols() != 1 || wv.rows() != xv.rows() {
            return Err(Error::Dimension {
                op: "scale_rows",
                left: xv.shape(),
                right: wv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let w = wv.data()[r];
            for v in out.row_mut(r) {
                *v *= w;
            }
        }
        Ok(self.push(out, Op::ScaleRows(x, weights), &[x, weights]))
    }

    /// Column `k` of `x` as an `n × 1` node.
    pub fn column(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if k >= xv.cols() {
            return Err(Error::Index {
                op: "column",
                index: k,
                bound: xv.cols(),
            });
        }
        let vals: Vec<f64> = (0..xv.rows()).map(|r| xv.get(r, k)).collect();
        Ok(self.push(Tensor::column(&vals), Op::Column(x, k), &[x]))
    }

    /// Rows `[start, end)` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Index {
                op: "slice_rows",
                index: end,
                bound: xv.rows() + 1,
            });
        }
        let out = xv.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    /// Sum of all entries as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// One reverse sweep from the scalar `loss`.
    ///
    /// Every parameter leaf on the tape gets an entry; leaves the loss does
    /// not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            visited += 1;
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if node.param {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, n)| {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(adj, *a, g.matmul(&bv.transpose()).expect("matmul grad"));
                }
                if self.wants(*b) {
                    accumulate(adj, *b, av.transpose().matmul(g).expect("matmul grad"));
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    accumulate(adj, *x, g.clone());
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(adj, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.map(|v| v * c)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *o = 0.0;
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = g.clone();
                for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= y * (1.0 - y);
                }
                accumulate(adj, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let upstream = g.item();
                let n = labels.len() as f64;
                let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                for (r, &label) in labels.iter().enumerate() {
                    let p = pv.get(r, label);
                    if p >= PROB_EPS {
                        gp.set(r, label, -upstream / (n * p));
                    }
                }
                accumulate(adj, *probs, gp);
            }
            Op::BinaryCrossEntropy {
                pred,
                targets,
                weights,
            } => {
                let pv = self.value(*pred);
                let upstream = g.item();
                let n = pv.rows() as f64;
                let mut gp = Tensor::zeros(pv.rows(), 1);
                for i in 0..pv.rows() {
                    let p = pv.data()[i];
                    let w = weights.data()[i];
                    if w == 0.0 || !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        continue;
                    }
                    let t = targets.data()[i];
                    gp.data_mut()[i] = upstream * w / n * (-t / p + (1.0 - t) / (1.0 - p));
                }
                accumulate(adj, *pred, gp);
            }
            Op::GradReverse(x, lambda) => {
                let neg = -lambda;
                accumulate(adj, *x, g.map(|v| neg * v));
            }
            Op::ScaleRows(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let wr = wv.data()[r];
                        for v in gx.row_mut(r) {
                            *v *= wr;
                        }
                    }
                    accumulate(adj, *x, gx);
                }
                if self.wants(*w) {
                    let vals: Vec<f64> = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(adj, *w, Tensor::column(&vals));
                }
            }
            Op::Column(x, k) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.set(r, *k, g.data()[r]);
                }
                accumulate(adj, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(adj, *x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(adj, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` with respect to every entry of `params`.
pub fn numeric_gradient<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].rows(), params[p].cols());
        for j in 0..params[p].len() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest [`relative_error`] across matching entries of two gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape plus one parameter leaf per entry of
/// `params` and returns the scalar loss node. The result is the maximum
/// relative error over all parameter entries.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract(format!("step h must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();

    let mut failure = None;
    let numeric = numeric_gradient(
        |ps| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            match loss_fn(&mut t, &vs) {
                Ok(l) => t.value(l).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        params,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn relu_forward_and_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[-1.0, 0.0, 2.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &t(&[&[0.0, 0.0, 2.0]]));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), &t(&[&[0.0, 0.0, 1.0]]));
    }

    #[test]
    fn relu_positive_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.5, 3.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0; 4]]));
        assert_eq!(s, t(&[&[0.25; 4]]));
        for c in [-40.0, 0.0, 3.5, 700.0] {
            let s = softmax_rows(&t(&[&[c, c]]));
            assert_eq!(s, t(&[&[0.5, 0.5]]));
        }
        let s = softmax_rows(&t(&[&[1f64.ln(), 3f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = tape.cross_entropy(p, &[0, 1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let u = tape.constant(Tensor::filled(3, 4, 0.25));
        let l = tape.cross_entropy(u, &[0, 3, 2]).unwrap();
        assert!((tape.value(l).item() - 1.386294).abs() < 1e-6);

        let h = tape.constant(t(&[&[0.5, 0.5]]));
        let l = tape.cross_entropy(h, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[&[0.5, 0.5]]));
        assert!(matches!(
            tape.cross_entropy(p, &[2]),
            Err(Error::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(&[1.0, 0.0]));
        let targets = Tensor::column(&[1.0, 0.0]);
        let l = tape
            .binary_cross_entropy(p, &targets, &Tensor::ones(2, 1))
            .unwrap();
        assert!(tape.value(l).item() < 1e-11);

        let p = tape.constant(Tensor::column(&[0.5]));
        let l = tape
            .binary_cross_entropy(p, &Tensor::column(&[1.0]), &Tensor::ones(1, 1))
            .unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = tape.constant(Tensor::column(&[0.3, 0.9]));
        let l = tape
            .binary_cross_entropy(p, &Tensor::column(&[1.0, 0.0]), &Tensor::zeros(2, 1))
            .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn bce_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(&[0.5, 0.5]));
        let err = tape
            .binary_cross_entropy(p, &Tensor::column(&[1.0]), &Tensor::ones(2, 1))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn grad_reverse_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[3.0, 4.0]]));
        let y = tape.grad_reverse(x, 1.0).unwrap();
        assert_eq!(tape.value(y), &t(&[&[3.0, 4.0]]));
        // upstream [[1, 2]] via weighted sum
        let w = tape.constant(t(&[&[1.0], &[2.0]]));
        let l = tape.matmul(y, w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x), &t(&[&[-1.0, -2.0]]));

        let mut tape = Tape::new();
        let x = tape.param(t(&[&[7.0]]));
        let y = tape.grad_reverse(x, 0.5).unwrap();
        let l = tape.scale(y, 2.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x), &t(&[&[-1.0]]));
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[1.0]]));
        assert!(tape.grad_reverse(x, -0.1).is_err());
    }

    #[test]
    fn scale_rows_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[3.0, 4.0], &[1.0, -1.0]]));
        let ones = tape.constant(Tensor::ones(2, 1));
        let y = tape.scale_rows(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let w = tape.constant(Tensor::column(&[0.0, 1.0]));
        let y = tape.scale_rows(x, w).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);

        let x = tape.constant(t(&[&[3.0, 4.0]]));
        let w = tape.constant(Tensor::column(&[0.5]));
        let y = tape.scale_rows(x, w).unwrap();
        assert_eq!(tape.value(y), &t(&[&[1.5, 2.0]]));

        let bad = tape.constant(Tensor::column(&[0.5, 1.0]));
        assert!(tape.scale_rows(x, bad).is_err());
    }

    #[test]
    fn scale_rows_detached_weights_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[3.0, 4.0]]));
        let w = tape.param(Tensor::column(&[0.5]));
        let wd = tape.detach(w);
        let y = tape.scale_rows(x, wd).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(w), &Tensor::zeros(1, 1));
        assert_eq!(g.wrt(x), &t(&[&[0.5, 0.5]]));
    }

    #[test]
    fn backward_linear_and_annihilated() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[&[1.0, -2.0], &[0.3, 4.0]]));
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(w), &Tensor::ones(2, 2));

        let mut tape = Tape::new();
        let w = tape.param(t(&[&[1.0, -2.0]]));
        let r = tape.relu(w);
        let s = tape.sum(r);
        let l = tape.scale(s, 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(2, 2));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_record_once() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(2, 2));
        let a = tape.relu(w);
        let b = tape.add(a, w).unwrap();
        let l = tape.sum(b);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.records_visited(), tape.len());
        assert_eq!(g.wrt(w), &Tensor::filled(2, 2, 2.0));
    }

    #[test]
    fn finite_diff_quadratic_and_linear() {
        let w = t(&[&[0.3, -1.2], &[2.0, 0.7]]);
        let quad = finite_diff_check(
            |tape, ps| {
                let sq = elementwise_square(tape, ps[0])?;
                Ok(tape.scale(sq, 0.5))
            },
            std::slice::from_ref(&w),
            1e-5,
        )
        .unwrap();
        assert!(quad < 1e-8, "{quad}");

        let lin = finite_diff_check(|tape, ps| Ok(tape.sum(ps[0])), &[w], 1e-5).unwrap();
        assert!(lin < 1e-10, "{lin}");
    }

    // sum_ij a_ij^2 expressed with the available operators: for each column
    // c, scale rows of column c by itself.
    fn elementwise_square(tape: &mut Tape, a: Var) -> Result<Var> {
        let cols = tape.value(a).cols();
        let mut total: Option<Var> = None;
        for c in 0..cols {
            let col = tape.column(a, c)?;
            let sq = tape.scale_rows(col, col)?;
            let s = tape.sum(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        Ok(total.expect("at least one column"))
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(finite_diff_check(|t, p| Ok(t.sum(p[0])), &[Tensor::ones(1, 1)], 0.0).is_err());
    }
}
