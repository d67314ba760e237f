//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`DiffGraph`] records operations in construction order, which is already
//! a topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Nodes are addressed by [`NodeId`]; leaves
//! are either [`DiffGraph::input`] (gradient-carrying) or
//! [`DiffGraph::constant`] (opaque data such as features or noise).
//!
//! Every op validates operand shapes up front and checks its output for NaN
//! or infinity, so a non-finite loss is reported at the op that produced it.

use std::rc::Rc;

use super::{NumericsError, SparseMatrix, Tensor};

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNT(NodeId, NodeId),
    /// Sparse-dense product; the sparse factor is constant data.
    Spmm(Rc<SparseMatrix>, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Matrix plus a 1 x cols bias row broadcast to every row.
    AddRow(NodeId, NodeId),
    /// `k * x + c` elementwise; only the slope matters to the adjoint, so
    /// the offset lives in the eagerly computed value alone.
    Affine(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Mul(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Identity forward; negates the adjoint on the way back.
    GradReverse(NodeId),
    /// Fused stable softmax + mean cross-entropy; caches the row-softmax
    /// probabilities for the backward rule.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Rc<Vec<usize>>,
        probs: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Whether any gradient-carrying leaf feeds this node.
    needs_grad: bool,
}

/// Gradients of one scalar output with respect to tape nodes.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `id`, if any gradient flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, or zeros of the given shape when no gradient reached
    /// it (a parameter that does not influence the loss).
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// A recording of a differentiable computation.
#[derive(Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
}

impl DiffGraph {
    pub fn new() -> Self {
        DiffGraph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Registers a gradient-carrying leaf.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, NumericsError> {
        value.check_finite("input")?;
        Ok(self.push(Op::Leaf, value, true))
    }

    /// Registers a constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, NumericsError> {
        value.check_finite("constant")?;
        Ok(self.push(Op::Leaf, value, false))
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn finish(
        &mut self,
        op: Op,
        value: Tensor,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<NodeId, NumericsError> {
        value.check_finite(name)?;
        Ok(self.push(op, value, needs_grad))
    }

    fn shape_err(
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    ) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs_rows: a.0,
            lhs_cols: a.1,
            rhs_rows: b.0,
            rhs_cols: b.1,
        }
    }

    /// Dense matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.cols() != bv.rows() {
            return Err(Self::shape_err("matmul", av.shape(), bv.shape()));
        }
        let value = av.matmul(bv);
        let ng = self.needs(a) || self.needs(b);
        self.finish(Op::MatMul(a, b), value, ng, "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.cols() != bv.cols() {
            return Err(Self::shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let value = av.matmul_nt(bv);
        let ng = self.needs(a) || self.needs(b);
        self.finish(Op::MatMulNT(a, b), value, ng, "matmul_nt")
    }

    /// Sparse-dense product `sparse * b`. The sparse factor is data, not a
    /// differentiable node.
    pub fn spmm(&mut self, sparse: Rc<SparseMatrix>, b: NodeId) -> Result<NodeId, NumericsError> {
        let bv = &self.nodes[b].value;
        if sparse.cols() != bv.rows() {
            return Err(Self::shape_err(
                "spmm",
                (sparse.rows(), sparse.cols()),
                bv.shape(),
            ));
        }
        let value = sparse.mul_dense(bv);
        let ng = self.needs(b);
        self.finish(Op::Spmm(sparse, b), value, ng, "spmm")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("add", av.shape(), bv.shape()));
        }
        let value = av.add(bv);
        let ng = self.needs(a) || self.needs(b);
        self.finish(Op::Add(a, b), value, ng, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("sub", av.shape(), bv.shape()));
        }
        let value = av.sub(bv);
        let ng = self.needs(a) || self.needs(b);
        self.finish(Op::Sub(a, b), value, ng, "sub")
    }

    /// Adds a 1 x cols bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[bias].value);
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Self::shape_err("add_row", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, b) in row.iter_mut().zip(bv.row(0)) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.finish(Op::AddRow(a, bias), value, ng, "add_row")
    }

    /// `k * a` elementwise.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, NumericsError> {
        self.affine(a, k, 0.0)
    }

    /// `k * a + c` elementwise.
    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> Result<NodeId, NumericsError> {
        if !(k.is_finite() && c.is_finite()) {
            return Err(NumericsError::NonFinite { op: "affine" });
        }
        let value = self.nodes[a].value.map(|x| k * x + c);
        let ng = self.needs(a);
        self.finish(Op::Affine(a, k), value, ng, "affine")
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.nodes[a].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.finish(Op::Relu(a), value, ng, "relu")
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.nodes[a].value.map(sigmoid);
        let ng = self.needs(a);
        self.finish(Op::Sigmoid(a), value, ng, "sigmoid")
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = softmax_rows(&self.nodes[a].value);
        let ng = self.needs(a);
        self.finish(Op::SoftmaxRows(a), value, ng, "softmax_rows")
    }

    /// Elementwise natural log. Non-positive inputs produce a NonFinite
    /// error rather than NaN/-inf; clamp first when saturation is possible.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let av = &self.nodes[a].value;
        if av.data().iter().any(|&x| x <= 0.0) {
            return Err(NumericsError::NonFinite { op: "log" });
        }
        let value = av.map(f64::ln);
        let ng = self.needs(a);
        self.finish(Op::Log(a), value, ng, "log")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("mul", av.shape(), bv.shape()));
        }
        let value = av.hadamard(bv);
        let ng = self.needs(a) || self.needs(b);
        self.finish(Op::Mul(a, b), value, ng, "mul")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the open
    /// interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, NumericsError> {
        // Infinite bounds are allowed (one-sided clamps); NaN is not.
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(NumericsError::invalid("clamp", "bad bounds"));
        }
        let value = self.nodes[a].value.map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.finish(Op::Clamp(a, lo, hi), value, ng, "clamp")
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = Tensor::scalar(self.nodes[a].value.sum());
        let ng = self.needs(a);
        self.finish(Op::SumAll(a), value, ng, "sum_all")
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let av = &self.nodes[a].value;
        let n = (av.rows() * av.cols()) as f64;
        if n == 0.0 {
            return Err(NumericsError::invalid("mean_all", "empty tensor"));
        }
        let value = Tensor::scalar(av.sum() / n);
        let ng = self.needs(a);
        self.finish(Op::MeanAll(a), value, ng, "mean_all")
    }

    /// Copies the given rows of `a` into a new matrix, one output row per
    /// index (indices may repeat). The adjoint scatter-adds back.
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId, NumericsError> {
        let av = &self.nodes[a].value;
        if rows.is_empty() {
            return Err(NumericsError::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(NumericsError::invalid(
                "gather_rows",
                format!("row {bad} out of bounds for {} rows", av.rows()),
            ));
        }
        let mut value = Tensor::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(av.row(r));
        }
        let ng = self.needs(a);
        self.finish(Op::GatherRows(a, Rc::new(rows)), value, ng, "gather_rows")
    }

    /// Gradient-reversal marker: forward is a bit-identical copy, backward
    /// delivers the exact negation of the upstream adjoint.
    pub fn grad_reverse(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.nodes[a].value.clone();
        let ng = self.needs(a);
        self.finish(Op::GradReverse(a), value, ng, "grad_reverse")
    }

    /// Fused softmax cross-entropy: mean over rows of `-log p[i, target_i]`,
    /// with the softmax computed stably (row max subtracted). Returns the
    /// 1x1 loss node; the row-softmax probabilities are available via
    /// [`DiffGraph::softmax_cross_entropy_probs`] on the returned node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let lv = &self.nodes[logits].value;
        if targets.len() != lv.rows() {
            return Err(NumericsError::invalid(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), lv.rows()),
            ));
        }
        if lv.rows() == 0 {
            return Err(NumericsError::invalid("softmax_cross_entropy", "no rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(NumericsError::invalid(
                "softmax_cross_entropy",
                format!("target class {bad} out of range for {} columns", lv.cols()),
            ));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            // log of the stable softmax, recomputed in log-space so tiny
            // probabilities do not round to zero. The max element of the row
            // contributes exp(0) = 1 exactly, so ln_1p over the remaining
            // terms keeps the log-sum accurate even when it is ~1e-9.
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_at = row.iter().position(|&x| x == max).unwrap_or(0);
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != max_at)
                .map(|(_, &x)| (x - max).exp())
                .sum();
            loss += rest.ln_1p() - (row[t] - max);
        }
        loss /= targets.len() as f64;
        let ng = self.needs(logits);
        self.finish(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                probs,
            },
            Tensor::scalar(loss),
            ng,
            "softmax_cross_entropy",
        )
    }

    /// The cached row-softmax probabilities of a fused cross-entropy node.
    pub fn softmax_cross_entropy_probs(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a 1x1 loss node. Visits nodes in reverse
    /// construction order (a topological order) exactly once.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let lv = &self.nodes[loss].value;
        if lv.shape() != (1, 1) {
            return Err(NumericsError::invalid(
                "backward",
                format!("loss must be 1x1, got {}x{}", lv.rows(), lv.cols()),
            ));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let upstream = match adjoints[id].take() {
                Some(u) => u,
                None => continue,
            };
            self.accumulate(id, &upstream, &mut adjoints)?;
            adjoints[id] = Some(upstream);
        }
        Ok(Gradients { adjoints })
    }

    /// Adds `delta` (possibly scaled) into the adjoint slot of `target`.
    fn bump(adjoints: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
        match &mut adjoints[target] {
            Some(acc) => acc.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(
        &self,
        id: NodeId,
        upstream: &Tensor,
        adjoints: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.matmul_nt(&self.nodes[*b].value));
                }
                if self.needs(*b) {
                    Self::bump(adjoints, *b, self.nodes[*a].value.matmul_tn(upstream));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.matmul(&self.nodes[*b].value));
                }
                if self.needs(*b) {
                    Self::bump(adjoints, *b, upstream.matmul_tn(&self.nodes[*a].value));
                }
            }
            Op::Spmm(sparse, b) => {
                if self.needs(*b) {
                    Self::bump(adjoints, *b, sparse.mul_dense_transposed(upstream));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.clone());
                }
                if self.needs(*b) {
                    Self::bump(adjoints, *b, upstream.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.clone());
                }
                if self.needs(*b) {
                    Self::bump(adjoints, *b, upstream.scale(-1.0));
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.clone());
                }
                if self.needs(*bias) {
                    Self::bump(adjoints, *bias, upstream.col_sums());
                }
            }
            Op::Affine(a, k) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.scale(*k));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let mask = self.nodes[*a]
                        .value
                        .map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::bump(adjoints, *a, upstream.hadamard(&mask));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let deriv = node.value.map(|s| s * (1.0 - s));
                    Self::bump(adjoints, *a, upstream.hadamard(&deriv));
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let s = &node.value;
                    let mut grad = Tensor::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let urow = upstream.row(r);
                        let dot: f64 = srow.iter().zip(urow).map(|(&si, &ui)| si * ui).sum();
                        let grow = grad.row_mut(r);
                        for c in 0..srow.len() {
                            grow[c] = srow[c] * (urow[c] - dot);
                        }
                    }
                    Self::bump(adjoints, *a, grad);
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let inv = self.nodes[*a].value.map(|x| 1.0 / x);
                    Self::bump(adjoints, *a, upstream.hadamard(&inv));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::bump(adjoints, *a, upstream.hadamard(&self.nodes[*b].value));
                }
                if self.needs(*b) {
                    Self::bump(adjoints, *b, upstream.hadamard(&self.nodes[*a].value));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let mask = self.nodes[*a]
                        .value
                        .map(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    Self::bump(adjoints, *a, upstream.hadamard(&mask));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let v = &self.nodes[*a].value;
                    Self::bump(adjoints, *a, Tensor::filled(v.rows(), v.cols(), upstream.item()));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let v = &self.nodes[*a].value;
                    let n = (v.rows() * v.cols()) as f64;
                    Self::bump(
                        adjoints,
                        *a,
                        Tensor::filled(v.rows(), v.cols(), upstream.item() / n),
                    );
                }
            }
            Op::GatherRows(a, rows) => {
                if self.needs(*a) {
                    let v = &self.nodes[*a].value;
                    let mut grad = Tensor::zeros(v.rows(), v.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        let urow = upstream.row(i);
                        let grow = grad.row_mut(r);
                        for c in 0..urow.len() {
                            grow[c] += urow[c];
                        }
                    }
                    Self::bump(adjoints, *a, grad);
                }
            }
            Op::GradReverse(a) => {
                if self.needs(*a) {
                    // Exact negation: only the sign bit of each entry flips.
                    Self::bump(adjoints, *a, upstream.map(|x| -x));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let n = targets.len() as f64;
                    let scale = upstream.item() / n;
                    let mut grad = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = grad.row_mut(i);
                        row[t] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= scale;
                        }
                    }
                    Self::bump(adjoints, *logits, grad);
                }
            }
        }
        Ok(())
    }

    /// Convenience: backward pass plus gradient extraction for a list of
    /// leaves. Leaves the loss does not depend on get zero gradients.
    pub fn grad(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, NumericsError> {
        let grads = self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|&id| {
                let v = self.value(id);
                grads.get_or_zeros(id, v.rows(), v.cols())
            })
            .collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}
