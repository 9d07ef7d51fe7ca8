//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends
//! a node holding its value; [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints.

use super::tensor::{log_sum_exp, softmax};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a broadcast `[1, n]` row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    /// Summed cross-entropy; caches the row softmaxes.
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant with no gradient path to any parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign_scaled(self.value(b), 1.0);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[1, n]` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        let n = ta.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += tb.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Side-by-side concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("gather", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(ids.len(), t.cols(), data)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    /// `Σ_r -log softmax(logits_r)[targets_r]`, computed with max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, k) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[bad]));
        }
        let mut probs = Vec::with_capacity(rows * k);
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row_slice(r);
            loss += log_sum_exp(row) - row[target];
            probs.extend(softmax(row));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sign pattern of every ReLU input, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients for every parameter in `store`; unused parameters get zeros.
    pub fn param_grads(&self, loss: Var, store: &ParamStore) -> Result<Vec<Tensor>> {
        let adjoints = self.backward(loss)?;
        let mut out: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (node, adj) in self.nodes.iter().zip(adjoints) {
            if let (Op::Param(id), Some(g)) = (&node.op, adj) {
                out[id.0].add_assign_scaled(&g, 1.0);
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                {
                    // dA = dY · Bᵀ
                    let da = slot(grads, *a, ta.shape());
                    let (gd, bd) = (g.data(), tb.data());
                    let dad = da.data_mut();
                    for i in 0..m {
                        let g_row = &gd[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let b_row = &bd[kk * n..(kk + 1) * n];
                            dad[i * k + kk] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                // dB = Aᵀ · dY
                let db = slot(grads, *b, tb.shape());
                let (gd, ad) = (g.data(), ta.data());
                let dbd = db.data_mut();
                for i in 0..m {
                    let g_row = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let x = ad[i * k + kk];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &gv) in dbd[kk * n..(kk + 1) * n].iter_mut().zip(g_row) {
                            *o += x * gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign_scaled(g, 1.0);
                slot(grads, *b, g.shape()).add_assign_scaled(g, 1.0);
            }
            Op::AddRow(a, bias) => {
                slot(grads, *a, g.shape()).add_assign_scaled(g, 1.0);
                let n = g.cols();
                let db = slot(grads, *bias, self.value(*bias).shape()).data_mut();
                for (i, &x) in g.data().iter().enumerate() {
                    db[i % n] += x;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = slot(grads, *a, ta.shape()).data_mut();
                for ((o, &gv), &bv) in da.iter_mut().zip(g.data()).zip(tb.data()) {
                    *o += gv * bv;
                }
                let db = slot(grads, *b, tb.shape()).data_mut();
                for ((o, &gv), &av) in db.iter_mut().zip(g.data()).zip(ta.data()) {
                    *o += gv * av;
                }
            }
            Op::Scale(a, c) => slot(grads, *a, g.shape()).add_assign_scaled(g, *c),
            Op::Relu(a) => {
                let x = self.value(*a);
                let da = slot(grads, *a, g.shape()).data_mut();
                for ((o, &gv), &xv) in da.iter_mut().zip(g.data()).zip(x.data()) {
                    // Subgradient 0 at the kink.
                    if xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Tanh(a) => {
                let da = slot(grads, *a, g.shape()).data_mut();
                for ((o, &gv), &yv) in da.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(a) => {
                let da = slot(grads, *a, g.shape()).data_mut();
                for ((o, &gv), &yv) in da.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = *shape.last().unwrap();
                    let dp = slot(grads, p, &shape).data_mut();
                    for r in 0..g.rows() {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        for (o, &x) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    let dp = slot(grads, p, &shape).data_mut();
                    for (o, &x) in dp.iter_mut().zip(&g.data()[offset..offset + len]) {
                        *o += x;
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.value(*a).shape().to_vec();
                let total = *shape.last().unwrap();
                let w = g.cols();
                let da = slot(grads, *a, &shape).data_mut();
                for r in 0..g.rows() {
                    let dst = &mut da[r * total + start..r * total + start + w];
                    for (o, &x) in dst.iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
            }
            Op::Gather(table, ids) => {
                let shape = self.value(*table).shape().to_vec();
                let w = *shape.last().unwrap();
                let dt = slot(grads, *table, &shape).data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in dt[id * w..(id + 1) * w].iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item();
                let shape = self.value(*logits).shape().to_vec();
                let k = *shape.last().unwrap();
                let dl = slot(grads, *logits, &shape).data_mut();
                for (r, &target) in targets.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == target { 1.0 } else { 0.0 };
                        dl[r * k + c] += scale * (probs[r * k + c] - onehot);
                    }
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                let s = g.item();
                slot(grads, *a, &shape).data_mut().iter_mut().for_each(|o| *o += s);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}
