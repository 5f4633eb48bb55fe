//! Reverse-mode automatic differentiation over a fixed matrix-op
//! vocabulary.
//!
//! A [`Tape`] records one forward pass as a flat arena of nodes; the
//! model graph here is small and static per training step, so a fresh
//! tape is built every step and dropped after [`Tape::backward`].
//! Parameters are registered by name; frozen tensors enter as constants
//! and never receive gradients. Gradient propagation skips subgraphs that
//! cannot reach a parameter.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Broadcast add of a `1×n` row vector to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Hadamard(NodeId, NodeId),
    /// Outer product of two column vectors: `m×1` and `n×1` give `m×n`.
    Outer(NodeId, NodeId),
    Relu(NodeId),
    /// The mask, when any, is baked into the stored probabilities; the
    /// backward formula is mask-agnostic because masked entries are zero.
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        eps: f64,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    Softplus(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Batch-mean KL divergence between rows of probabilities.
    KlDivMean {
        p: NodeId,
        q: NodeId,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    backward_done: bool,
}

/// Gradients per registered parameter, in registration order. Every
/// registered parameter is present; parameters the loss never touched get
/// zero matrices of the right shape.
#[derive(Debug)]
pub struct Gradients {
    entries: Vec<(String, Matrix)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn expect(&self, name: &str) -> &Matrix {
        self.get(name)
            .unwrap_or_else(|| panic!("no gradient for parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }
}

const P_OLD_FLOOR: f64 = 1e-12;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Leaf, false)
    }

    /// Registers a trainable parameter leaf under a unique name.
    pub fn param(&mut self, name: &str, m: Matrix) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Usage(format!(
                "parameter {name:?} registered twice on the same tape"
            )));
        }
        let id = self.push(m, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).shape();
        if self.value(row).shape() != (1, n) {
            return Err(Error::ShapeMismatch(format!(
                "add_row: {m}x{n} with {:?}",
                self.value(row).shape()
            )));
        }
        let mut v = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                let x = v.get(i, j) + self.value(row).get(0, j);
                v.set(i, j, x);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Hadamard(a, b), ng))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, ac) = self.value(a).shape();
        let (bm, bc) = self.value(b).shape();
        if ac != 1 || bc != 1 {
            return Err(Error::ShapeMismatch(format!(
                "outer expects column vectors, got {am}x{ac} and {bm}x{bc}"
            )));
        }
        let mut v = Matrix::zeros(am, bm);
        for i in 0..am {
            let ui = self.value(a).get(i, 0);
            for j in 0..bm {
                v.set(i, j, ui * self.value(b).get(j, 0));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Outer(a, b), ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.softmax_impl(a, false)
    }

    /// Row softmax with a lower-triangular mask: row `i` distributes
    /// attention over columns `<= i`. Requires a square input.
    pub fn causal_row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).shape();
        if m != n {
            return Err(Error::ShapeMismatch(format!(
                "causal softmax needs a square matrix, got {m}x{n}"
            )));
        }
        Ok(self.softmax_impl(a, true))
    }

    fn softmax_impl(&mut self, a: NodeId, causal: bool) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Matrix::zeros(m, n);
        for i in 0..m {
            let limit = if causal { i + 1 } else { n };
            let row = x.row(i);
            let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..limit {
                let e = (row[j] - max).exp();
                v.set(i, j, e);
                sum += e;
            }
            for j in 0..limit {
                let e = v.get(i, j);
                v.set(i, j, e / sum);
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::RowSoftmax(a), ng)
    }

    /// Row-wise layer normalization (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Matrix::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                v.set(i, j, (row[j] - mu) * inv);
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::LayerNorm { x: a, eps }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_rows(start, len)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceRows { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::ShapeMismatch("concat_cols row mismatch".into()));
            }
            cols += self.value(p).cols();
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let part = self.value(p);
            for i in 0..rows {
                for j in 0..part.cols() {
                    v.set(i, at + j, part.get(i, j));
                }
            }
            at += part.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (m, n) = x.shape();
        if start + len > n {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{} out of {n} cols",
                start + len
            )));
        }
        let mut v = Matrix::zeros(m, len);
        for i in 0..m {
            for j in 0..len {
                v.set(i, j, x.get(i, start + j));
            }
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceCols { x: a, start }, ng))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (m, n) = t.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of {m} rows"
            )));
        }
        let mut v = Matrix::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = softplus(*x);
        }
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let count = (x.rows() * x.cols()) as f64;
        let v = Matrix::from_fn(1, 1, |_, _| x.data().iter().sum::<f64>() / count);
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Matrix::from_fn(1, 1, |_, _| x.data().iter().sum::<f64>());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        let (b, k) = z.shape();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total += row_nll(z.row(i), y);
        }
        let v = Matrix::from_fn(1, 1, |_, _| total / b as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            v,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Batch-mean KL(p || q) over probability rows, with `0·log 0 = 0`
    /// and `q` clamped to `1e-12`. Rows must sum to 1 within `1e-6`.
    pub fn kl_div_mean(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let pv = self.value(p);
        let qv = self.value(q);
        if pv.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if pv.shape() != qv.shape() {
            return Err(Error::ShapeMismatch(format!(
                "kl_div_mean {:?} vs {:?}",
                pv.shape(),
                qv.shape()
            )));
        }
        check_probability_rows(pv)?;
        check_probability_rows(qv)?;
        let b = pv.rows() as f64;
        let mut total = 0.0;
        for i in 0..pv.rows() {
            for j in 0..pv.cols() {
                let pij = pv.get(i, j);
                if pij > 0.0 {
                    let qij = qv.get(i, j).max(P_OLD_FLOOR);
                    total += pij * (pij / qij).ln();
                }
            }
        }
        let v = Matrix::from_fn(1, 1, |_, _| total / b);
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(v, Op::KlDivMean { p, q }, ng))
    }

    /// Reverse pass from a scalar loss node. Consumes the tape's single
    /// backward budget: call once per forward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward called twice without a new forward pass".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss node is not on this tape".into()));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "loss must be a 1x1 scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(self.nodes[id.0].value.rows(), self.nodes[id.0].value.cols()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(g) => {
                *g = g.add(&delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone())?;
                if self.needs(row) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = db.get(0, j) + g.get(r, j);
                            db.set(0, j, v);
                        }
                    }
                    self.accumulate(grads, row, db)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.scale(c))?,
            Op::Matmul(a, b) => {
                if self.needs(a) {
                    let bt = self.value(b).transpose();
                    self.accumulate(grads, a, g.matmul(&bt)?)?;
                }
                if self.needs(b) {
                    let at = self.value(a).transpose();
                    self.accumulate(grads, b, at.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose())?,
            Op::Hadamard(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.hadamard(self.value(b))?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.hadamard(self.value(a))?)?;
                }
            }
            Op::Outer(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    let mut da = Matrix::zeros(av.rows(), 1);
                    for r in 0..av.rows() {
                        let mut acc = 0.0;
                        for j in 0..bv.rows() {
                            acc += g.get(r, j) * bv.get(j, 0);
                        }
                        da.set(r, 0, acc);
                    }
                    self.accumulate(grads, a, da)?;
                }
                if self.needs(b) {
                    let mut db = Matrix::zeros(bv.rows(), 1);
                    for j in 0..bv.rows() {
                        let mut acc = 0.0;
                        for r in 0..av.rows() {
                            acc += g.get(r, j) * av.get(r, 0);
                        }
                        db.set(j, 0, acc);
                    }
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Relu(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, a, dx)?;
            }
            Op::RowSoftmax(x) => {
                let p = &self.nodes[i].value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = (0..p.cols()).map(|j| g.get(r, j) * p.get(r, j)).sum();
                    for j in 0..p.cols() {
                        dx.set(r, j, p.get(r, j) * (g.get(r, j) - dot));
                    }
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.value(x);
                let y = &self.nodes[i].value;
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let mu = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean: f64 = (0..xv.cols()).map(|j| g.get(r, j)).sum::<f64>() / n;
                    let gydot: f64 = (0..xv.cols())
                        .map(|j| g.get(r, j) * y.get(r, j))
                        .sum::<f64>()
                        / n;
                    for j in 0..xv.cols() {
                        let v = inv * (g.get(r, j) - gmean - y.get(r, j) * gydot);
                        dx.set(r, j, v);
                    }
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if rows > 0 && self.needs(p) {
                        self.accumulate(grads, p, g.slice_rows(at, rows)?)?;
                    }
                    at += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let full = self.value(x);
                let mut dx = Matrix::zeros(full.rows(), full.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            for j in 0..cols {
                                dp.set(r, j, g.get(r, at + j));
                            }
                        }
                        self.accumulate(grads, p, dp)?;
                    }
                    at += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let full = self.value(x);
                let mut dx = Matrix::zeros(full.rows(), full.cols());
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        dx.set(r, start + j, g.get(r, j));
                    }
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::GatherRows { table, idx } => {
                let t = self.value(table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..t.cols() {
                        let v = dt.get(src, j) + g.get(r, j);
                        dt.set(src, j, v);
                    }
                }
                self.accumulate(grads, table, dt)?;
            }
            Op::Softplus(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= sigmoid(xv);
                }
                self.accumulate(grads, a, dx)?;
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let c = g.get(0, 0) / (x.rows() * x.cols()) as f64;
                self.accumulate(grads, a, Matrix::filled(x.rows(), x.cols(), c))?;
            }
            Op::Sum(a) => {
                let x = self.value(a);
                self.accumulate(grads, a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)))?;
            }
            Op::CrossEntropyMean { logits, labels } => {
                let z = self.value(logits);
                let (b, k) = z.shape();
                let scale = g.get(0, 0) / b as f64;
                let mut dz = Matrix::zeros(b, k);
                for (r, &y) in labels.iter().enumerate() {
                    let p = stable_softmax(z.row(r));
                    for j in 0..k {
                        let delta = if j == y { 1.0 } else { 0.0 };
                        dz.set(r, j, scale * (p[j] - delta));
                    }
                }
                self.accumulate(grads, logits, dz)?;
            }
            Op::KlDivMean { p, q } => {
                let pv = self.value(p);
                let qv = self.value(q);
                let b = pv.rows() as f64;
                let scale = g.get(0, 0) / b;
                if self.needs(p) {
                    let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        for j in 0..pv.cols() {
                            let pij = pv.get(r, j).max(P_OLD_FLOOR);
                            let qij = qv.get(r, j).max(P_OLD_FLOOR);
                            dp.set(r, j, scale * ((pij / qij).ln() + 1.0));
                        }
                    }
                    self.accumulate(grads, p, dp)?;
                }
                if self.needs(q) {
                    let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                    for r in 0..qv.rows() {
                        for j in 0..qv.cols() {
                            let pij = pv.get(r, j);
                            let qij = qv.get(r, j).max(P_OLD_FLOOR);
                            dq.set(r, j, -scale * pij / qij);
                        }
                    }
                    self.accumulate(grads, q, dq)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn row_nll(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

pub(crate) fn check_probability_rows(m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let sum: f64 = m.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "row {i} sums to {sum}, not a probability vector"
            )));
        }
    }
    Ok(())
}
