//! Reverse-mode autodiff over a recorded operation graph.
//!
//! Operations evaluate eagerly and append one node to the graph; node indices
//! are therefore already in topological order, and [`Graph::backward`] is a
//! single reverse sweep that visits each node exactly once. Gradients
//! accumulate additively when a node fans out to several consumers. Nodes
//! with `requires_grad == false` never receive a gradient buffer.

// index loops mirror the kernel arithmetic; iterator chains obscure it here
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::tensor::{Element, TensorData};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { input: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Transpose(NodeId),
    SliceCols { input: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L2NormRows(NodeId),
    MulColBroadcast(NodeId, NodeId),
    CrossEntropy { logits: NodeId, weights: TensorData<f64>, total_weight: f64 },
}

struct Node<E: Element> {
    value: TensorData<E>,
    requires_grad: bool,
    op: Op,
}

/// Gradient buffers produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<TensorData<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&TensorData<E>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or a zero tensor of the given shape when the leaf
    /// was never reached (e.g. a parameter multiplied by an exact zero).
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> TensorData<E> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => TensorData::zeros(shape.to_vec()),
        }
    }
}

/// Recorded forward pass. Single-threaded; distinct graphs are independent.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorData<E>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, requires_grad, op });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: TensorData<E>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: TensorData<E>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn leaf(&mut self, value: TensorData<E>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Copy of a node's value as a fresh constant; gradient does not flow back.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &TensorData<E> {
        &self.nodes[id.index()].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad(*id))
    }

    // ── Primitive operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = TensorData::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "add", |x, y| x.add(y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "sub", |x, y| x.sub(y), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "mul", |x, y| x.mul(y), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "div", |x, y| x.div(y), Op::Div(a, b))
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = TensorData::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    /// `a[n×d] + v[d]`, broadcasting `v` over rows.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        let d = va.cols();
        if vv.numel() != d || vv.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: va.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(va.numel());
        for i in 0..va.rows() {
            for j in 0..d {
                data.push(va.at2(i, j).add(vv.data()[j]));
            }
        }
        let value = TensorData::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, v]);
        Ok(self.push(value, rg, Op::AddRowVec(a, v)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ce = E::from_f64(c);
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.mul(ce)).collect();
        let value = TensorData::new(va.shape().to_vec(), data).expect("scale preserves shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let ce = E::from_f64(c);
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.add(ce)).collect();
        let value = TensorData::new(va.shape().to_vec(), data).expect("add_scalar preserves shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::AddScalar(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = TensorData::new(va.shape().to_vec(), data).expect("gelu preserves shape");
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Gelu(a))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::InvalidShape {
                op: "softmax_rows",
                shape: va.shape().to_vec(),
                message: "expected a 2D tensor".into(),
            });
        }
        if va.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN in input".into()));
        }
        let (n, m) = (va.rows(), va.cols());
        let mut data = vec![E::ZERO; n * m];
        for i in 0..n {
            let row = va.row(i);
            let mut max = row[0];
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = E::ZERO;
            for j in 0..m {
                let e = row[j].sub(max).exp();
                data[i * m + j] = e;
                sum = sum.add(e);
            }
            for j in 0..m {
                data[i * m + j] = data[i * m + j].div(sum);
            }
        }
        let value = TensorData::new(vec![n, m], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::SoftmaxRows(a)))
    }

    /// Per-row normalization to zero mean / unit variance followed by the
    /// affine map `gamma * xhat + beta`. Variance uses the population
    /// convention over the trailing dimension.
    pub fn layer_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (vi, vg, vb) = (self.value(input), self.value(gamma), self.value(beta));
        let d = vi.cols();
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vi.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Precondition("layer_norm: eps must be positive".into()));
        }
        let n = vi.rows();
        let mut data = vec![E::ZERO; n * d];
        for i in 0..n {
            let row = vi.row(i);
            let (xhat, _, _) = layer_norm_row(row, eps);
            for j in 0..d {
                data[i * d + j] = vg.data()[j].mul(xhat[j]).add(vb.data()[j]);
            }
        }
        let value = TensorData::new(vi.shape().to_vec(), data)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(value, rg, Op::LayerNorm { input, gamma, beta, eps }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: va.shape().to_vec(),
                message: "expected a 2D tensor".into(),
            });
        }
        let (n, m) = (va.rows(), va.cols());
        let data = transpose_raw(va.data(), n, m);
        let value = TensorData::new(vec![m, n], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::Transpose(a)))
    }

    /// Columns `[start, start+len)` of a 2D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (n, m) = (va.rows(), va.cols());
        if start + len > m || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: va.shape().to_vec(),
                message: format!("column range {start}..{} out of bounds", start + len),
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let value = TensorData::new(vec![n, len], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::SliceCols { input: a, start, len }))
    }

    /// Concatenates 2D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Precondition("concat_cols: empty part list".into()));
        }
        let n = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = TensorData::new(vec![n, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Column means of a 2D tensor, kept as a `[1, d]` row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = (va.rows(), va.cols());
        let inv = E::from_f64(1.0 / n as f64);
        let mut data = vec![E::ZERO; d];
        for i in 0..n {
            for j in 0..d {
                data[j] = data[j].add(va.at2(i, j));
            }
        }
        for v in &mut data {
            *v = v.mul(inv);
        }
        let value = TensorData::new(vec![1, d], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut s = E::ZERO;
        for &x in va.data() {
            s = s.add(x);
        }
        let rg = self.requires_grad(a);
        self.push(TensorData::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let inv = E::from_f64(1.0 / va.numel() as f64);
        let mut s = E::ZERO;
        for &x in va.data() {
            s = s.add(x);
        }
        let rg = self.requires_grad(a);
        self.push(TensorData::scalar(s.mul(inv)), rg, Op::MeanAll(a))
    }

    /// Euclidean norm of each row of a 2D tensor, as a 1D `[n]` vector.
    /// A zero row yields 0; its backward contribution is defined as 0.
    pub fn l2_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::InvalidShape {
                op: "l2_norm_rows",
                shape: va.shape().to_vec(),
                message: "expected a 2D tensor".into(),
            });
        }
        let n = va.rows();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = E::ZERO;
            for &x in va.row(i) {
                s = s.add(x.mul(x));
            }
            data.push(s.sqrt());
        }
        let value = TensorData::new(vec![n], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::L2NormRows(a)))
    }

    /// Scales row `i` of `a[n×d]` by `c[i]`.
    pub fn mul_col_broadcast(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(c));
        let n = va.rows();
        if vc.numel() != n || vc.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: va.shape().to_vec(),
                rhs: vc.shape().to_vec(),
            });
        }
        let d = va.cols();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let ci = vc.data()[i];
            for j in 0..d {
                data.push(va.at2(i, j).mul(ci));
            }
        }
        let value = TensorData::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, c]);
        Ok(self.push(value, rg, Op::MulColBroadcast(a, c)))
    }

    /// Weighted softmax cross-entropy, averaged over total weight.
    ///
    /// `weights[i][c]` is the (nonnegative) count or indicator of class `c`
    /// for row `i`; zero-weight rows and classes are ignored, which is how
    /// unlabeled pixels are excluded.
    pub fn cross_entropy(&mut self, logits: NodeId, weights: &TensorData<f64>) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        if !vl.all_finite() {
            return Err(Error::Numeric("cross_entropy: non-finite logits".into()));
        }
        let total_weight: f64 = weights.data().iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::Precondition("cross_entropy: total weight is zero".into()));
        }
        let (n, k) = (vl.rows(), vl.cols());
        let mut loss = 0.0;
        for i in 0..n {
            let row = vl.row(i);
            let mut max = row[0].to_f64();
            for &x in row {
                max = max.max(x.to_f64());
            }
            let mut sum = 0.0;
            for &x in row {
                sum += (x.to_f64() - max).exp();
            }
            let lse = max + sum.ln();
            for c in 0..k {
                let w = weights.at2(i, c);
                if w > 0.0 {
                    loss += w * (lse - row[c].to_f64());
                }
            }
        }
        let value = TensorData::scalar(E::from_f64(loss / total_weight));
        let rg = self.requires_grad(logits);
        Ok(self.push(value, rg, Op::CrossEntropy { logits, weights: weights.clone(), total_weight }))
    }

    // ── Backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// reachable node with `requires_grad`, shapes matching the forward values.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        let vl = self.value(loss);
        if vl.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: vl.shape().to_vec(),
                message: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<TensorData<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.index()] = Some(TensorData::full(vl.shape().to_vec(), E::ONE));

        for idx in (0..=loss.index()).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<TensorData<E>>], id: NodeId, delta: TensorData<E>) {
        if !self.requires_grad(id) {
            return;
        }
        match &mut grads[id.index()] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape());
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a = a.add(*d);
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &TensorData<E>, grads: &mut [Option<TensorData<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = g · Bᵀ
                    let bt = transpose_raw(vb.data(), k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    self.accumulate(grads, *a, TensorData::new(vec![m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · g
                    let at = transpose_raw(va.data(), m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    self.accumulate(grads, *b, TensorData::new(vec![k, n], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = map_data(g, |x| x.neg());
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_data(g, vb, |x, y| x.mul(y)));
                self.accumulate(grads, *b, zip_data(g, va, |x, y| x.mul(y)));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_data(g, vb, |x, y| x.div(y)));
                if self.requires_grad(*b) {
                    let mut db = TensorData::zeros(vb.shape().to_vec());
                    for (i, d) in db.data_mut().iter_mut().enumerate() {
                        let bi = vb.data()[i];
                        *d = g.data()[i].mul(va.data()[i]).neg().div(bi.mul(bi));
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRowVec(a, v) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*v) {
                    let d = self.value(*v).numel();
                    let mut dv: TensorData<E> = TensorData::zeros(vec![d]);
                    for i in 0..g.rows() {
                        for j in 0..d {
                            dv.data_mut()[j] = dv.data_mut()[j].add(g.at2(i, j));
                        }
                    }
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::Scale(a, c) => {
                let ce = E::from_f64(*c);
                self.accumulate(grads, *a, map_data(g, |x| x.mul(ce)));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let mut da = TensorData::zeros(va.shape().to_vec());
                for (i, d) in da.data_mut().iter_mut().enumerate() {
                    *d = g.data()[i].mul(gelu_grad_scalar(va.data()[i]));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (n, m) = (y.rows(), y.cols());
                let mut da = TensorData::zeros(vec![n, m]);
                for i in 0..n {
                    let mut dot = E::ZERO;
                    for j in 0..m {
                        dot = dot.add(g.at2(i, j).mul(y.at2(i, j)));
                    }
                    for j in 0..m {
                        da.data_mut()[i * m + j] = y.at2(i, j).mul(g.at2(i, j).sub(dot));
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { input, gamma, beta, eps } => {
                let (vi, vg) = (self.value(*input), self.value(*gamma));
                let (n, d) = (vi.rows(), vi.cols());
                let mut dx = TensorData::zeros(vi.shape().to_vec());
                let mut dgamma: TensorData<E> = TensorData::zeros(vec![d]);
                let mut dbeta: TensorData<E> = TensorData::zeros(vec![d]);
                let inv_d = E::from_f64(1.0 / d as f64);
                for i in 0..n {
                    let row = vi.row(i);
                    let (xhat, _, s) = layer_norm_row(row, *eps);
                    // dxhat = g ∘ gamma; reduce for mean terms
                    let mut sum_dxhat = E::ZERO;
                    let mut sum_dxhat_xhat = E::ZERO;
                    let mut dxhat = vec![E::ZERO; d];
                    for j in 0..d {
                        let v = g.at2(i, j).mul(vg.data()[j]);
                        dxhat[j] = v;
                        sum_dxhat = sum_dxhat.add(v);
                        sum_dxhat_xhat = sum_dxhat_xhat.add(v.mul(xhat[j]));
                        dgamma.data_mut()[j] = dgamma.data_mut()[j].add(g.at2(i, j).mul(xhat[j]));
                        dbeta.data_mut()[j] = dbeta.data_mut()[j].add(g.at2(i, j));
                    }
                    let mean_dxhat = sum_dxhat.mul(inv_d);
                    let mean_dxhat_xhat = sum_dxhat_xhat.mul(inv_d);
                    for j in 0..d {
                        let t = dxhat[j].sub(mean_dxhat).sub(xhat[j].mul(mean_dxhat_xhat));
                        dx.data_mut()[i * d + j] = t.div(s);
                    }
                }
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let data = transpose_raw(g.data(), n, m);
                self.accumulate(grads, *a, TensorData::new(vec![m, n], data).unwrap());
            }
            Op::SliceCols { input, start, len } => {
                if self.requires_grad(*input) {
                    let vi = self.value(*input);
                    let (n, m) = (vi.rows(), vi.cols());
                    let mut da = TensorData::zeros(vec![n, m]);
                    for i in 0..n {
                        for j in 0..*len {
                            da.data_mut()[i * m + start + j] = g.at2(i, j);
                        }
                    }
                    self.accumulate(grads, *input, da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let n = g.rows();
                        let mut dp = TensorData::zeros(vec![n, w]);
                        for i in 0..n {
                            for j in 0..w {
                                dp.data_mut()[i * w + j] = g.at2(i, offset + j);
                            }
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let (n, d) = (va.rows(), va.cols());
                let inv = E::from_f64(1.0 / n as f64);
                let mut da = TensorData::zeros(vec![n, d]);
                for i in 0..n {
                    for j in 0..d {
                        da.data_mut()[i * d + j] = g.data()[j].mul(inv);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let da = TensorData::full(va.shape().to_vec(), g.data()[0]);
                self.accumulate(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let inv = E::from_f64(1.0 / va.numel() as f64);
                let da = TensorData::full(va.shape().to_vec(), g.data()[0].mul(inv));
                self.accumulate(grads, *a, da);
            }
            Op::L2NormRows(a) => {
                let va = self.value(*a);
                let norms = &self.nodes[idx].value;
                let (n, d) = (va.rows(), va.cols());
                let mut da = TensorData::zeros(vec![n, d]);
                for i in 0..n {
                    let ni = norms.data()[i];
                    if ni.to_f64() == 0.0 {
                        continue; // zero row: gradient defined as 0
                    }
                    for j in 0..d {
                        da.data_mut()[i * d + j] = g.data()[i].mul(va.at2(i, j)).div(ni);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::MulColBroadcast(a, c) => {
                let (va, vc) = (self.value(*a), self.value(*c));
                let (n, d) = (va.rows(), va.cols());
                if self.requires_grad(*a) {
                    let mut da = TensorData::zeros(vec![n, d]);
                    for i in 0..n {
                        let ci = vc.data()[i];
                        for j in 0..d {
                            da.data_mut()[i * d + j] = g.at2(i, j).mul(ci);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*c) {
                    let mut dc: TensorData<E> = TensorData::zeros(vec![n]);
                    for i in 0..n {
                        let mut s = E::ZERO;
                        for j in 0..d {
                            s = s.add(g.at2(i, j).mul(va.at2(i, j)));
                        }
                        dc.data_mut()[i] = s;
                    }
                    self.accumulate(grads, *c, dc);
                }
            }
            Op::CrossEntropy { logits, weights, total_weight } => {
                let vl = self.value(*logits);
                let (n, k) = (vl.rows(), vl.cols());
                let scale = g.data()[0].to_f64() / total_weight;
                let mut dl = TensorData::zeros(vec![n, k]);
                for i in 0..n {
                    let row = vl.row(i);
                    let mut row_weight = 0.0;
                    for c in 0..k {
                        row_weight += weights.at2(i, c);
                    }
                    if row_weight == 0.0 {
                        continue;
                    }
                    let mut max = row[0].to_f64();
                    for &x in row {
                        max = max.max(x.to_f64());
                    }
                    let mut sum = 0.0;
                    for &x in row {
                        sum += (x.to_f64() - max).exp();
                    }
                    for c in 0..k {
                        let p = (row[c].to_f64() - max).exp() / sum;
                        let d = scale * (p * row_weight - weights.at2(i, c));
                        dl.data_mut()[i * k + c] = E::from_f64(d);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

// ── Scalar kernels and raw matrix helpers ─────────────────────────────────

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar<E: Element>(x: E) -> E {
    let xf = x.to_f64();
    let inner = GELU_C * (xf + GELU_A * xf * xf * xf);
    E::from_f64(0.5 * xf * (1.0 + inner.tanh()))
}

fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let xf = x.to_f64();
    let inner = GELU_C * (xf + GELU_A * xf * xf * xf);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    E::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * d_inner)
}

/// Returns (xhat, mean, sqrt(var + eps)) for one row.
fn layer_norm_row<E: Element>(row: &[E], eps: f64) -> (Vec<E>, E, E) {
    let d = row.len();
    let inv_d = E::from_f64(1.0 / d as f64);
    let mut mean = E::ZERO;
    for &x in row {
        mean = mean.add(x);
    }
    mean = mean.mul(inv_d);
    let mut var = E::ZERO;
    for &x in row {
        let c = x.sub(mean);
        var = var.add(c.mul(c));
    }
    var = var.mul(inv_d);
    let s = var.add(E::from_f64(eps)).sqrt();
    let xhat = row.iter().map(|&x| x.sub(mean).div(s)).collect();
    (xhat, mean, s)
}

fn map_data<E: Element>(t: &TensorData<E>, f: impl Fn(E) -> E) -> TensorData<E> {
    TensorData::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("map preserves shape")
}

fn zip_data<E: Element>(a: &TensorData<E>, b: &TensorData<E>, f: impl Fn(E, E) -> E) -> TensorData<E> {
    TensorData::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip preserves shape")
}

pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j].add(aip.mul(brow[j]));
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<E: Element>(a: &[E], n: usize, m: usize) -> Vec<E> {
    let mut t = vec![E::ZERO; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_against_fd, DEFAULT_FLOOR, DEFAULT_STEP};
    use crate::tensor::derive_seed;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_for(label: &str, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(0xD0D0, label, &[salt]))
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> TensorData<f64> {
        TensorData::randn(shape.to_vec(), 1.0, rng)
    }

    /// Loss = sum(output ∘ probe) with a fixed random probe; checks the
    /// gradient of `inputs[which]` against central finite differences.
    fn check_input_grad(
        inputs: &[TensorData<f64>],
        which: usize,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> crate::Result<NodeId>,
        tol: f64,
    ) {
        let run = |xs: &[TensorData<f64>]| -> crate::Result<(f64, Option<TensorData<f64>>)> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
            let y = build(&mut g, &ids)?;
            let mut probe_rng = rng_for("probe", y.index() as u64 + 1000 * g.value(y).numel() as u64);
            let probe = randn(g.value(y).shape(), &mut probe_rng);
            let p = g.constant(probe);
            let z = g.mul(y, p)?;
            let loss = g.sum_all(z);
            let grads = g.backward(loss)?;
            let gx = grads.get(ids[which]).cloned();
            Ok((g.value(loss).data()[0], gx))
        };
        let (_, analytic) = run(inputs).expect("forward failed");
        let analytic = analytic.expect("no gradient for checked input");
        let report = check_against_fd(
            &inputs[which],
            &analytic,
            |probe_x| {
                let mut xs = inputs.to_vec();
                xs[which] = probe_x.clone();
                run(&xs).map(|(l, _)| l)
            },
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )
        .expect("fd failed");
        assert!(
            report.within(tol),
            "gradient mismatch: rel {} at index {} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst_index,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }

    // ── matmul ────────────────────────────────────────────────────────────

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(TensorData::eye(2));
        let j2 = g.constant(TensorData::eye(2));
        let c = g.matmul(i2, j2).unwrap();
        assert_eq!(g.value(c), &TensorData::eye(2));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(TensorData::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::zeros(vec![2, 3]));
        let b = g.constant(TensorData::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = rng_for("matmul", 0);
        let a = randn(&[5, 7], &mut rng);
        let b = randn(&[7, 3], &mut rng);
        for which in 0..2 {
            check_input_grad(&[a.clone(), b.clone()], which, |g, ids| g.matmul(ids[0], ids[1]), 1e-6);
        }
    }

    // ── softmax ───────────────────────────────────────────────────────────

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(a).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_entries_do_not_overflow() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = g.softmax_rows(a).unwrap();
        let v = g.value(y).data();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
        assert!(matches!(g.softmax_rows(a), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = rng_for("softmax", 1);
        let a = randn(&[4, 4], &mut rng);
        check_input_grad(&[a], 0, |g, ids| g.softmax_rows(ids[0]), 1e-6);
    }

    // ── layer norm ────────────────────────────────────────────────────────

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(TensorData::from_rows(&[vec![3.5; 6]]).unwrap());
        let gamma = g.constant(TensorData::full(vec![6], 1.0));
        let beta = g.constant(TensorData::zeros(vec![6]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let mut g = Graph::<f64>::new();
        let mut rng = rng_for("ln-beta", 2);
        let x = g.constant(randn(&[3, 4], &mut rng));
        let gamma = g.constant(TensorData::zeros(vec![4]));
        let beta = g.constant(TensorData::from_f64_slice(vec![4], &[1.0, -2.0, 0.5, 9.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(y).row(i), &[1.0, -2.0, 0.5, 9.0]);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = rng_for("ln-grad", 3);
        let x = randn(&[3, 5], &mut rng);
        let gamma = randn(&[5], &mut rng);
        let beta = randn(&[5], &mut rng);
        for which in 0..3 {
            check_input_grad(
                &[x.clone(), gamma.clone(), beta.clone()],
                which,
                |g, ids| g.layer_norm(ids[0], ids[1], ids[2], 1e-6),
                1e-6,
            );
        }
    }

    // ── l2 norms ──────────────────────────────────────────────────────────

    #[test]
    fn l2_norm_rows_hand_case_and_zero_row() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
        let y = g.l2_norm_rows(a).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn l2_norm_rows_matches_naive_summation_oracle() {
        let mut rng = rng_for("l2", 4);
        let a = randn(&[6, 8], &mut rng);
        let mut g = Graph::<f64>::new();
        let id = g.constant(a.clone());
        let y = g.l2_norm_rows(id).unwrap();
        for i in 0..6 {
            // independent naive loop
            let mut s = 0.0;
            for j in 0..8 {
                s += a.at2(i, j) * a.at2(i, j);
            }
            assert!((g.value(y).data()[i] - s.sqrt()).abs() < 1e-7);
        }
    }

    // ── remaining primitives: gradients on three shapes each ─────────────

    #[test]
    fn elementwise_and_structural_primitives_match_finite_differences() {
        let shapes: [&[usize]; 3] = [&[2, 3], &[4, 4], &[1, 5]];
        for (si, shape) in shapes.iter().enumerate() {
            let mut rng = rng_for("prims", si as u64);
            let a = randn(shape, &mut rng);
            let b = randn(shape, &mut rng);
            // bounded away from zero for division
            let bdiv = TensorData::new(
                shape.to_vec(),
                b.data().iter().map(|&v| v + 3.0 * v.signum() + f64::from(v == 0.0)).collect(),
            )
            .unwrap();
            let v = randn(&[shape[1]], &mut rng);
            let c = randn(&[shape[0]], &mut rng);

            for which in 0..2 {
                check_input_grad(&[a.clone(), b.clone()], which, |g, ids| g.add(ids[0], ids[1]), 1e-5);
                check_input_grad(&[a.clone(), b.clone()], which, |g, ids| g.sub(ids[0], ids[1]), 1e-5);
                check_input_grad(&[a.clone(), b.clone()], which, |g, ids| g.mul(ids[0], ids[1]), 1e-5);
                check_input_grad(&[a.clone(), bdiv.clone()], which, |g, ids| g.div(ids[0], ids[1]), 1e-5);
                check_input_grad(&[a.clone(), v.clone()], which, |g, ids| g.add_row_vec(ids[0], ids[1]), 1e-5);
                check_input_grad(&[a.clone(), c.clone()], which, |g, ids| g.mul_col_broadcast(ids[0], ids[1]), 1e-5);
            }
            check_input_grad(&[a.clone()], 0, |g, ids| Ok(g.scale(ids[0], -1.7)), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| Ok(g.add_scalar(ids[0], 0.3)), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| Ok(g.gelu(ids[0])), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| g.transpose(ids[0]), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| g.slice_cols(ids[0], 1, shape[1] - 1), 1e-5);
            check_input_grad(&[a.clone(), b.clone()], 1, |g, ids| g.concat_cols(ids), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| g.mean_rows(ids[0]), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| Ok(g.sum_all(ids[0])), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| Ok(g.mean_all(ids[0])), 1e-5);
            check_input_grad(&[a.clone()], 0, |g, ids| g.l2_norm_rows(ids[0]), 1e-5);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = rng_for("ce", 9);
        let logits = randn(&[4, 3], &mut rng);
        let mut weights = TensorData::<f64>::zeros(vec![4, 3]);
        weights.data_mut()[0] = 1.0; // row 0 -> class 0
        weights.data_mut()[4] = 1.0; // row 1 -> class 1
        weights.data_mut()[8] = 2.0; // row 2 -> class 2, weight 2
        // row 3: all-zero weights, ignored
        let run = |x: &TensorData<f64>| -> crate::Result<f64> {
            let mut g = Graph::new();
            let id = g.param(x.clone());
            let loss = g.cross_entropy(id, &weights)?;
            Ok(g.value(loss).data()[0])
        };
        let mut g = Graph::new();
        let id = g.param(logits.clone());
        let loss = g.cross_entropy(id, &weights).unwrap();
        let grads = g.backward(loss).unwrap();
        let report = check_against_fd(&logits, grads.get(id).unwrap(), run, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
        assert!(report.within(1e-6), "rel {}", report.max_rel_error);
        // ignored row receives exactly zero gradient
        let gx = grads.get(id).unwrap();
        assert_eq!(gx.row(3), &[0.0, 0.0, 0.0]);
    }

    // ── graph semantics ───────────────────────────────────────────────────

    #[test]
    fn fanout_gradients_accumulate_additively() {
        let mut rng = rng_for("fanout", 5);
        let x = randn(&[3, 3], &mut rng);

        let grad_of = |single: bool, scaled: bool| -> TensorData<f64> {
            let mut g = Graph::new();
            let id = g.param(x.clone());
            let y = if single {
                if scaled {
                    g.scale(id, 2.0)
                } else {
                    g.gelu(id)
                }
            } else {
                let f = g.scale(id, 2.0);
                let h = g.gelu(id);
                g.add(f, h).unwrap()
            };
            let loss = g.sum_all(y);
            let grads = g.backward(loss).unwrap();
            grads.get(id).unwrap().clone()
        };

        let combined = grad_of(false, false);
        let f_only = grad_of(true, true);
        let g_only = grad_of(true, false);
        for i in 0..combined.numel() {
            let sum = f_only.data()[i] + g_only.data()[i];
            assert!((combined.data()[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::full(vec![2, 2], 1.0));
        let w = g.constant(TensorData::full(vec![2, 2], 2.0));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn detach_stops_gradient_flow() {
        let mut g = Graph::<f64>::new();
        let x = g.param(TensorData::full(vec![2], 3.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap(); // y = x * stop(x); dy/dx = stop(x)
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let run = || {
            let mut rng = rng_for("determinism", 6);
            let mut g = Graph::<f32>::new();
            let a = g.param(TensorData::randn(vec![4, 6], 1.0, &mut rng));
            let b = g.param(TensorData::randn(vec![6, 2], 1.0, &mut rng));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, n in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut g = Graph::<f64>::new();
            let a = g.constant(TensorData::new(vec![n, m], vals).unwrap());
            let y = g.softmax_rows(a).unwrap();
            for i in 0..n {
                let s: f64 = g.value(y).row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(g.value(y).row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }
}
