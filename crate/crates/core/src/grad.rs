//! Minimal reverse-mode differentiation over the op set needed to train the
//! adapters and the adversarial embeddings.
//!
//! A [`Tape`] is a flat, append-only sequence of nodes whose insertion order
//! is a topological order. Tapes are rebuilt every iteration; there is no
//! graph reuse. Backward accumulation iterates nodes strictly in reverse
//! insertion order, so gradients are bit-for-bit deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::{softmax_columns, Matrix};
use crate::resag::logistic;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Parameter(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    ColSoftmax(NodeId),
    Logistic(NodeId),
    /// `DiagScale(x, g)`: column j of x scaled by g[0, j].
    DiagScale(NodeId, NodeId),
    FrobeniusNorm(NodeId),
    SquaredFrobenius(NodeId),
    Mean(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients keyed by parameter name; every registered parameter has an
/// entry (zero if unreachable from the loss).
pub type GradientMap = BTreeMap<String, Matrix>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Registers a trainable leaf. Names must be unique per tape.
    pub fn parameter(&mut self, name: &str, value: Matrix) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::invalid_input(format!(
                "parameter {name} registered twice"
            )));
        }
        let id = self.push(Op::Parameter(name.to_string()), value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.checked_matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::shape(
                "tape add",
                self.nodes[a].value.shape_string(),
                self.nodes[b].value.shape_string(),
            ));
        }
        let value = self.nodes[a].value.add(&self.nodes[b].value);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.nodes[a].value.scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn col_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = softmax_columns(&self.nodes[a].value)?;
        Ok(self.push(Op::ColSoftmax(a), value))
    }

    pub fn logistic(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a].value;
        let value = Matrix::from_vec(
            src.rows(),
            src.cols(),
            src.data().iter().map(|&x| logistic(x)).collect(),
        );
        self.push(Op::Logistic(a), value)
    }

    /// Scales column j of `x` by entry j of the 1×m row `g`.
    pub fn diag_scale(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[g].value;
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::shape(
                "tape diag_scale",
                xv.shape_string(),
                gv.shape_string(),
            ));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                value.set(i, j, value.get(i, j) * gv.get(0, j));
            }
        }
        Ok(self.push(Op::DiagScale(x, g), value))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.two_norm();
        self.push(Op::FrobeniusNorm(a), Matrix::from_vec(1, 1, vec![n]))
    }

    pub fn squared_frobenius(&mut self, a: NodeId) -> NodeId {
        let n: f64 = self.nodes[a].value.data().iter().map(|x| x * x).sum();
        self.push(Op::SquaredFrobenius(a), Matrix::from_vec(1, 1, vec![n]))
    }

    /// Elementwise mean of same-shaped inputs.
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid_input("tape mean: no inputs"));
        }
        let shape = self.nodes[inputs[0]].value.shape();
        let mut acc = Matrix::zeros(shape.0, shape.1);
        for &id in inputs {
            if self.nodes[id].value.shape() != shape {
                return Err(Error::shape(
                    "tape mean",
                    self.nodes[id].value.shape_string(),
                    format!("{}x{}", shape.0, shape.1),
                ));
            }
            acc = acc.add(&self.nodes[id].value);
        }
        let value = acc.scale(1.0 / inputs.len() as f64);
        Ok(self.push(Op::Mean(inputs.to_vec()), value))
    }

    /// Left-fold of binary adds; a plain sum of scalar (or same-shape) nodes.
    pub fn sum(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let mut iter = inputs.iter();
        let first = *iter
            .next()
            .ok_or_else(|| Error::invalid_input("tape sum: no inputs"))?;
        let mut acc = first;
        for &id in iter {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.nodes[id].value;
        if v.shape() != (1, 1) {
            return Err(Error::invalid_input(format!(
                "node {id} is {} not a scalar",
                v.shape_string()
            )));
        }
        Ok(v.get(0, 0))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns the gradient of
    /// the loss with respect to every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        if loss >= self.nodes.len() {
            return Err(Error::invalid_input("backward: loss node out of range"));
        }
        if self.nodes[loss].value.shape() != (1, 1) {
            return Err(Error::invalid_input(format!(
                "backward: loss must be scalar, got {}",
                self.nodes[loss].value.shape_string()
            )));
        }

        let mut adjoints: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Constant | Op::Parameter(_) => {
                    adjoints[id] = Some(adj);
                }
                Op::MatMul(a, b) => {
                    let da = adj.matmul(&self.nodes[*b].value.transpose());
                    let db = self.nodes[*a].value.transpose().matmul(&adj);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut adjoints, *a, adj.transpose());
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, adj.clone());
                    accumulate(&mut adjoints, *b, adj);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut adjoints, *a, adj.scale(*s));
                }
                Op::ColSoftmax(a) => {
                    // Per column: dL/dx = s ∘ (ĝ − (sᵀ ĝ) 1), avoiding the
                    // full m×m Jacobian.
                    let s = &self.nodes[id].value;
                    let mut grad = Matrix::zeros(s.rows(), s.cols());
                    for j in 0..s.cols() {
                        let mut dot = 0.0;
                        for i in 0..s.rows() {
                            dot += s.get(i, j) * adj.get(i, j);
                        }
                        for i in 0..s.rows() {
                            grad.set(i, j, s.get(i, j) * (adj.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut adjoints, *a, grad);
                }
                Op::Logistic(a) => {
                    let y = &self.nodes[id].value;
                    let mut grad = adj.clone();
                    for (g, &v) in grad.data_mut().iter_mut().zip(y.data()) {
                        *g *= v * (1.0 - v);
                    }
                    accumulate(&mut adjoints, *a, grad);
                }
                Op::DiagScale(x, gnode) => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gnode].value;
                    let mut dx = adj.clone();
                    for i in 0..dx.rows() {
                        for j in 0..dx.cols() {
                            dx.set(i, j, dx.get(i, j) * gv.get(0, j));
                        }
                    }
                    let mut dg = Matrix::zeros(1, gv.cols());
                    for j in 0..gv.cols() {
                        let mut acc = 0.0;
                        for i in 0..xv.rows() {
                            acc += adj.get(i, j) * xv.get(i, j);
                        }
                        dg.set(0, j, acc);
                    }
                    accumulate(&mut adjoints, *x, dx);
                    accumulate(&mut adjoints, *gnode, dg);
                }
                Op::FrobeniusNorm(a) => {
                    // d||X||_F/dX = X/||X||_F; defined as zero at X = 0 so a
                    // zero residual at init cannot produce non-finite grads.
                    let norm = self.nodes[id].value.get(0, 0);
                    let scale = if norm == 0.0 { 0.0 } else { adj.get(0, 0) / norm };
                    accumulate(&mut adjoints, *a, self.nodes[*a].value.scale(scale));
                }
                Op::SquaredFrobenius(a) => {
                    let scale = 2.0 * adj.get(0, 0);
                    accumulate(&mut adjoints, *a, self.nodes[*a].value.scale(scale));
                }
                Op::Mean(inputs) => {
                    let scale = 1.0 / inputs.len() as f64;
                    for &input in inputs {
                        accumulate(&mut adjoints, input, adj.scale(scale));
                    }
                }
            }
        }

        let mut grads = GradientMap::new();
        for (name, &id) in &self.params {
            let shape = self.nodes[id].value.shape();
            let grad = adjoints[id]
                .take()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            if !grad.is_finite() {
                return Err(Error::invalid_input(format!(
                    "gradient of {name} is non-finite"
                )));
            }
            grads.insert(name.clone(), grad);
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], id: NodeId, grad: Matrix) {
    match &mut adjoints[id] {
        Some(acc) => *acc = acc.add(&grad),
        slot @ None => *slot = Some(grad),
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `build` constructs the tape and loss for a given parameter assignment;
/// it is re-run for every perturbed entry. Returns the max relative error
/// over all parameter entries, with denominator `max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(params: &BTreeMap<String, Matrix>, fd_step: f64, build: F) -> Result<f64>
where
    F: Fn(&BTreeMap<String, Matrix>) -> Result<(Tape, NodeId)>,
{
    if fd_step <= 0.0 {
        return Err(Error::invalid_input("grad_check: fd_step must be positive"));
    }
    let (tape, loss) = build(params)?;
    let analytic = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::InvalidState(format!("no gradient for {name}")))?;
        for idx in 0..value.data().len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += fd_step;
            let (tp, lp) = build(&plus)?;
            let fp = tp.scalar(lp)?;

            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= fd_step;
            let (tm, lm) = build(&minus)?;
            let fm = tm.scalar(lm)?;

            let numeric = (fp - fm) / (2.0 * fd_step);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
