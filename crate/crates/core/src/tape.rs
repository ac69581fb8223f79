//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Only the operations the recurrent engine and the objectives need are
//! supported. Every value is a rank-2 matrix (rows are batch items); scalars
//! are 1×1. Nodes are appended in evaluation order, so a reverse sweep over
//! the node list is a valid topological order for backpropagation.

use crate::tensor::{gemm, log_softmax_rows, sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Var, Var),
    SliceCols(Var, usize),
    /// Σ weights ⊙ a, a 1×1 result.
    WeightedSum(Var, Tensor),
    /// scale · Σ_r −log softmax(a)[r, target_r] over rows with a target.
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.rank() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(&[r, c]).expect("rank-1 to row matrix")
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked. Rank-1 values become 1×n rows.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul operand shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add operand shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "broadcast operand must be a single row");
        assert_eq!(av.cols(), rv.cols(), "broadcast width");
        let mut value = av.clone();
        let cols = av.cols();
        for r in value.data_mut().chunks_mut(cols) {
            for (x, b) in r.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub operand shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul operand shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat row count");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![av.rows(), ca + cb], data).expect("concat shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Concat(a, b), ng)
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start + width <= cols, "column slice out of range");
        let mut data = Vec::with_capacity(av.rows() * width);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor::new(vec![av.rows(), width], data).expect("slice shape");
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Var {
        let av = self.value(a);
        let weights = weights.reshape(av.shape()).expect("weight shape");
        let value = Tensor::scalar(av.dot(&weights));
        let ng = self.needs(a);
        self.push(value, Op::WeightedSum(a, weights), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        self.weighted_sum(a, Tensor::filled(&shape, 1.0))
    }

    /// Sum of several nodes of equal shape; a zero scalar for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(Tensor::scalar(0.0)),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax,
    /// multiplied by `scale`. Rows with `None` are masked out.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<Option<usize>>, scale: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let logp = log_softmax_rows(lv);
        let cols = lv.cols();
        let mut nll = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < cols, "target index out of range");
                nll -= logp.data()[r * cols + t];
            }
        }
        let probs = logp.map(f64::exp);
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(scale * nll),
            Op::SoftmaxXent {
                logits,
                targets,
                scale,
                probs,
            },
            ng,
        )
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// depends on a tracked leaf.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if !self.needs(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let slot = slot(grads, *a, av.shape());
                    gemm(false, true, m, n, k, g.data(), bv.data(), 1.0, slot.data_mut());
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, bv.shape());
                    gemm(true, false, k, m, n, av.data(), g.data(), 1.0, slot.data_mut());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g);
                if self.needs(*row) {
                    let cols = g.cols();
                    let slot = slot(grads, *row, self.value(*row).shape());
                    for r in g.data().chunks(cols) {
                        for (s, v) in slot.data_mut().iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.needs(*b) {
                    let slot = slot(grads, *b, g.shape());
                    for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                        *s -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let slot = slot(grads, *a, g.shape());
                    for ((s, gv), y) in slot.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *s += gv * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let slot = slot(grads, *b, g.shape());
                    for ((s, gv), x) in slot.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *s += gv * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    let slot = slot(grads, *a, g.shape());
                    for (s, gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *s += gv * k;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let slot = slot(grads, *a, g.shape());
                    for ((s, gv), y) in slot.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *s += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let slot = slot(grads, *a, g.shape());
                    for ((s, gv), y) in slot.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *s += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let width = ca + cb;
                if self.needs(*a) {
                    let slot = slot(grads, *a, self.value(*a).shape());
                    for (dst, src) in slot.data_mut().chunks_mut(ca).zip(g.data().chunks(width)) {
                        for (d, s) in dst.iter_mut().zip(&src[..ca]) {
                            *d += s;
                        }
                    }
                }
                if self.needs(*b) {
                    let slot = slot(grads, *b, self.value(*b).shape());
                    for (dst, src) in slot.data_mut().chunks_mut(cb).zip(g.data().chunks(width)) {
                        for (d, s) in dst.iter_mut().zip(&src[ca..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let cols = self.value(*a).cols();
                    let width = g.cols();
                    let slot = slot(grads, *a, self.value(*a).shape());
                    for (dst, src) in slot.data_mut().chunks_mut(cols).zip(g.data().chunks(width)) {
                        for (d, s) in dst[*start..*start + width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::WeightedSum(a, weights) => {
                if self.needs(*a) {
                    let gs = g.data()[0];
                    let slot = slot(grads, *a, weights.shape());
                    for (s, w) in slot.data_mut().iter_mut().zip(weights.data()) {
                        *s += gs * w;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                scale,
                probs,
            } => {
                if self.needs(*logits) {
                    let gs = g.data()[0] * scale;
                    let cols = probs.cols();
                    let slot = slot(grads, *logits, probs.shape());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut slot.data_mut()[r * cols..(r + 1) * cols];
                        for (c, (s, p)) in row.iter_mut().zip(&probs.data()[r * cols..]).enumerate() {
                            *s += gs * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            empty => *empty = Some(g.clone()),
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
