//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built eagerly: every op computes its value immediately and
//! appends a node. Node ids are handed out in creation order, so the node list
//! is already a topological order and the backward sweep simply walks it in
//! reverse.

use crate::error::{Result, TeraError};
use crate::rng::TeraRng;

use super::kernels;
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Vec<T>),
    Scale(NodeId, T),
    /// Elementwise derivative, kept only when a gradient is needed.
    Act(NodeId, Activation, Vec<T>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { x: NodeId, idx: Vec<usize> },
    ScaleByElem { x: NodeId, s: NodeId, idx: usize },
    Sum(NodeId),
    L1Sum { pred: NodeId, target: Tensor<T>, mask: Option<Vec<bool>> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Act(_, Activation::Gelu, _) => "gelu",
            Op::Act(_, Activation::Relu, _) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScaleByElem { .. } => "scale_by_elem",
            Op::Sum(..) => "sum",
            Op::L1Sum { .. } => "l1_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients indexed by node; `None` for nodes that do not require a gradient.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, detail: String) -> TeraError {
    TeraError::Contract(format!("{op}: {detail}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        if self.value(b).len() != n {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data();
        let data = self.value(a).data().chunks(n).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    /// `x · w + b` for `x: [m,in]`, `w: [in,out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a fixed (non-differentiated) factor.
    pub fn mul_const(&mut self, a: NodeId, factor: Vec<T>) -> Result<NodeId> {
        if factor.len() != self.value(a).len() {
            return Err(shape_err("mul_const", format!("{} factors for {:?}", factor.len(), self.value(a).shape())));
        }
        let data = self.value(a).data().iter().zip(&factor).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, factor), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let rg = self.rg(&[a]);
        let x = self.value(a);
        let (value, deriv) = match act {
            Activation::Gelu if rg => {
                let (y, d): (Vec<T>, Vec<T>) = x.data().iter().map(|&v| kernels::gelu_with_grad(v)).unzip();
                (Tensor::new(x.shape().to_vec(), y).expect("same shape"), d)
            }
            Activation::Gelu => (x.map(kernels::gelu), Vec::new()),
            Activation::Relu => (x.map(|v| v.max(T::zero())), Vec::new()),
        };
        self.push(value, Op::Act(a, act, deriv), rg)
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    /// The sampled mask is recorded so the gradient is exact for it.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut TeraRng) -> Result<NodeId> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let h = self.value(x).cols();
        if self.value(gain).len() != h || self.value(bias).len() != h {
            return Err(shape_err("layer_norm", format!("gain/bias length vs width {h}")));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            T::c(eps),
        );
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row-wise softmax. Columns with `valid[c] == false` get probability 0.
    pub fn softmax_rows(&mut self, x: NodeId, valid: Option<&[bool]>) -> Result<NodeId> {
        if let Some(v) = valid {
            if v.len() != self.value(x).cols() {
                return Err(shape_err("softmax_rows", "mask length differs from row width".into()));
            }
            if !v.iter().any(|&b| b) {
                return Err(shape_err("softmax_rows", "every column is masked".into()));
            }
        }
        let y = kernels::softmax_rows_masked(self.value(x), valid);
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Softmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {c} columns", start + len)));
        }
        let data = xv.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let value = Tensor::new(vec![xv.rows(), len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let rows = self.value(x).rows();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index out of {rows} rows")));
        }
        let value = self.value(x).gather_rows(&idx);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, idx }, rg))
    }

    /// `x · s[idx]` where `s` is another node.
    pub fn scale_by_elem(&mut self, x: NodeId, s: NodeId, idx: usize) -> Result<NodeId> {
        let factor = *self
            .value(s)
            .data()
            .get(idx)
            .ok_or_else(|| shape_err("scale_by_elem", format!("index {idx} out of range")))?;
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleByElem { x, s, idx }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// `Σ |pred − target|` over the cells where `mask` is true (all cells if `None`).
    pub fn l1_sum(&mut self, pred: NodeId, target: Tensor<T>, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("l1_sum", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        if mask.as_ref().is_some_and(|m| m.len() != pv.len()) {
            return Err(shape_err("l1_sum", "mask length differs from tensor size".into()));
        }
        let s: T = pv
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .filter(|(i, _)| mask.as_ref().is_none_or(|m| m[*i]))
            .map(|(_, (&p, &t))| (p - t).abs())
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(s), Op::L1Sum { pred, target, mask }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [n,K]` against class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let probs = kernels::softmax_rows_masked(lv, None);
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            // log-sum-exp form avoids log(0) for saturated rows
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        let value = Tensor::scalar(loss / T::c(n as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels, probs: probs.into_data() }, rg))
    }

    /// First node holding a non-finite value.
    fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.is_finite())
    }

    /// Loss value and reverse-mode gradients of every node that requires one.
    pub fn value_and_grad(&self, loss: NodeId) -> Result<(T, Gradients<T>)> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TeraError::Contract(format!("loss node must be scalar, has shape {:?}", lv.shape())));
        }
        if let Some(i) = self.first_non_finite() {
            return Err(TeraError::NumericFault { node: i, op: self.nodes[i].op.name() });
        }
        let grads = self.backward(loss);
        if let Some((i, _)) = grads.grads.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(TeraError::NumericFault { node: i, op: self.nodes[i].op.name() });
        }
        Ok((lv.data()[0], grads))
    }

    fn backward(&self, loss: NodeId) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], id: NodeId) -> Option<&'a mut [T]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.acc(grads, *a) {
                    matmul_bt_acc(gd, bv.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    matmul_at_acc(av.data(), gd, db, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(da) = self.acc(grads, *a) {
                    matmul_acc(gd, bv.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    matmul_at_acc(gd, av.data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(d) = self.acc(grads, *id) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    let n = db.len();
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &g), &x) in db.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::MulConst(a, f) => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(f) {
                        *d += g * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Act(a, act, deriv) => {
                let xv = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    match act {
                        Activation::Gelu => {
                            for ((d, &g), &dy) in da.iter_mut().zip(gd).zip(deriv) {
                                *d += g * dy;
                            }
                        }
                        Activation::Relu => {
                            for ((d, &g), &x) in da.iter_mut().zip(gd).zip(xv) {
                                if x > T::zero() {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let h = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(dg) = self.acc(grads, *gain) {
                    for (grow, xrow) in gd.chunks(h).zip(xhat.chunks(h)) {
                        for ((d, &g), &xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += g * xh;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for grow in gd.chunks(h) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::layer_norm_backward(gd, gv, xhat, rstd, dx, h);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = node.value.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(k).zip(gd.chunks(k)).zip(y.chunks(k)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.value(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(c).zip(gd.chunks(len)) {
                        drow[*start..start + len].iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(dp) = self.acc(grads, p) {
                        for (drow, grow) in dp.chunks_mut(c).zip(gd.chunks(total)) {
                            drow.iter_mut().zip(&grow[offset..offset + c]).for_each(|(d, &g)| *d += g);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        dx[src * c..(src + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ScaleByElem { x, s, idx } => {
                let factor = self.value(*s).data()[*idx];
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * factor);
                }
                let xv = self.value(*x).data();
                if let Some(ds) = self.acc(grads, *s) {
                    ds[*idx] += gd.iter().zip(xv).map(|(&g, &v)| g * v).sum::<T>();
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::L1Sum { pred, target, mask } => {
                let pv = self.value(*pred).data();
                if let Some(dp) = self.acc(grads, *pred) {
                    for (i, ((d, &p), &t)) in dp.iter_mut().zip(pv).zip(target.data()).enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            let diff = p - t;
                            if diff > T::zero() {
                                *d += gd[0];
                            } else if diff < T::zero() {
                                *d -= gd[0];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).cols();
                let scale = gd[0] / T::c(labels.len() as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == l { T::one() } else { T::zero() };
                            dl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}
