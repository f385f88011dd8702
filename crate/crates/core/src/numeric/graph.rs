//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order. Backward walks ids in reverse and accumulates each
//! contribution in that fixed order, which makes gradients bitwise
//! reproducible for a fixed graph.

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, gelu, gelu_grad, gemm_nt, gemm_tn, sigmoid};
use crate::numeric::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// `a[R×C] + b[r×C]` with `b` tiled `R / r` times along rows.
    AddTiled(NodeId, NodeId),
    /// Scales row `i` of `a` by `s[i]`.
    MulRows(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(NodeId),
    Mean(NodeId),
    AbsSum(NodeId),
    Reshape(NodeId),
    GatherRows { src: NodeId, index: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Attention { q: NodeId, k: NodeId, v: NodeId, batch: usize, heads: usize, probs: Vec<T> },
    Mse { pred: NodeId, target: Tensor<T> },
    CrossEntropy { logits: NodeId, classes: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
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

    /// Inserts a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone().with_grad(false);
        self.push(v, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = kernels::check_matrix("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Adds `b` (shape `[r, C]` or `[C]`) to every block of `r` rows of `a`.
    pub fn add_tiled(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let rows = va.rows();
        let brows = vb.len() / cols.max(1);
        if vb.cols() != cols || brows == 0 || rows % brows != 0 || brows * cols != vb.len() {
            return Err(Error::dim("add_tiled", format!("{:?} + tiled {:?}", va.shape(), vb.shape())));
        }
        let block = brows * cols;
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let v = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddTiled(a, b), rg))
    }

    /// Scales each row of matrix `a` by the matching entry of vector `s`.
    pub fn mul_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (va, vs) = (self.value(a), self.value(s));
        if va.ndim() != 2 || vs.len() != va.rows() {
            return Err(Error::dim("mul_rows", format!("{:?} rows scaled by {:?}", va.shape(), vs.shape())));
        }
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for (row, &w) in data.chunks_mut(cols).zip(vs.data()) {
            for x in row {
                *x *= w;
            }
        }
        let v = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(v, Op::MulRows(a, s), rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = vx.cols();
        if vg.len() != cols || vb.len() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?} with gamma {:?} beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (xhat, inv_std) = kernels::layer_norm_stats(vx.data(), vx.rows(), cols, eps);
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for ((y, &g), &b) in row.iter_mut().zip(vg.data()).zip(vb.data()) {
                *y = *y * g + b;
            }
        }
        let v = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = T::lit(self.value(a).len() as f64);
        let v = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// l1 norm; the backward pass uses `sign(0) = 0`.
    pub fn abs_sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &x in self.value(a).data() {
            acc += x.abs();
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(acc), Op::AbsSum(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().with_grad(false).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `out[r] = src[index[r]]` over rows of a matrix.
    pub fn gather_rows(&mut self, src: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let vs = self.value(src);
        let (rows, cols) = kernels::check_matrix("gather_rows", vs)?;
        if index.is_empty() {
            return Err(Error::dim("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of range for {:?}", vs.shape())));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(vs.row(i));
        }
        let v = Tensor::new(&[index.len(), cols], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(v, Op::GatherRows { src, index }, rg))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.cols() != cols {
                return Err(Error::dim("concat_rows", format!("column mismatch at {:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(&[rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·N, C]`; sample `b` owns rows `b·N..(b+1)·N`
    /// and head `h` owns columns `h·d..(h+1)·d` with `d = C / heads`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, batch: usize, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", vq, vk)?;
        same_shape("attention", vq, vv)?;
        let (rows, c) = kernels::check_matrix("attention", vq)?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("width {c} not divisible by {heads} heads")));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::dim("attention", format!("{rows} rows not divisible by batch {batch}")));
        }
        let n = rows / batch;
        let d = c / heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); rows * c];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                for i in 0..n {
                    let qi = &qd[(b * n + i) * c + h * d..(b * n + i) * c + (h + 1) * d];
                    let prow = &mut p[i * n..(i + 1) * n];
                    let mut max = T::neg_infinity();
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * n + j) * c + h * d..(b * n + j) * c + (h + 1) * d];
                        let mut acc = T::zero();
                        for (&x, &y) in qi.iter().zip(kj) {
                            acc += x * y;
                        }
                        *pj = acc * scale;
                        max = max.max(*pj);
                    }
                    let mut total = T::zero();
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        total += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= total;
                    }
                    let orow = &mut out[(b * n + i) * c + h * d..(b * n + i) * c + (h + 1) * d];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(b * n + j) * c + h * d..(b * n + j) * c + (h + 1) * d];
                        for (o, &y) in orow.iter_mut().zip(vj) {
                            *o += pj * y;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, c], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, batch, heads, probs }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let vp = self.value(pred);
        same_shape("mse", vp, &target)?;
        let mut acc = T::zero();
        for (&p, &t) in vp.data().iter().zip(target.data()) {
            let d = p - t;
            acc += d * d;
        }
        let v = Tensor::scalar(acc / T::lit(vp.len() as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(v, Op::Mse { pred, target }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[class]`.
    pub fn cross_entropy(&mut self, logits: NodeId, classes: Vec<usize>) -> Result<NodeId> {
        let vl = self.value(logits);
        let (rows, k) = kernels::check_matrix("cross_entropy", vl)?;
        if classes.len() != rows {
            return Err(Error::dim("cross_entropy", format!("{rows} rows, {} targets", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("class {bad} out of range for {k} logits")));
        }
        let mut probs = vec![T::zero(); rows * k];
        kernels::softmax_into(vl.data(), &mut probs, &[rows, k], 1);
        let mut acc = T::zero();
        for (r, &c) in classes.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut lse = T::zero();
            for &x in row {
                lse += (x - max).exp();
            }
            acc += lse.ln() + max - row[c];
        }
        let v = Tensor::scalar(acc / T::lit(rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(v, Op::CrossEntropy { logits, classes, probs }, rg))
    }

    /// Reverse-mode pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: NodeId) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(id)));
        }
        slot.as_mut()
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(gd, vb.data(), ga.data_mut(), m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(va.data(), gd, gb.data_mut(), m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    let gad = ga.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            gad[i * n + j] += gd[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(gx) = self.acc(grads, id) {
                        add_into(gx.data_mut(), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga.data_mut(), gd);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, &y) in gb.data_mut().iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *x += gy * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &gy), &y) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                        *x += gy * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &gy) in ga.data_mut().iter_mut().zip(gd) {
                        *x += gy * *c;
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga.data_mut(), gd);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let block = gb.len();
                    let gbd = gb.data_mut();
                    for chunk in gd.chunks(block) {
                        add_into(gbd, chunk);
                    }
                }
            }
            Op::MulRows(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s));
                let cols = va.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((row, grow), &w) in ga.data_mut().chunks_mut(cols).zip(gd.chunks(cols)).zip(vs.data()) {
                        for (x, &gy) in row.iter_mut().zip(grow) {
                            *x += gy * w;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for ((x, grow), arow) in gs.data_mut().iter_mut().zip(gd.chunks(cols)).zip(va.data().chunks(cols)) {
                        let mut acc = T::zero();
                        for (&gy, &y) in grow.iter().zip(arow) {
                            acc += gy * y;
                        }
                        *x += acc;
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.data_mut().iter_mut().zip(gd).zip(va) {
                        *x += gy * gelu_grad(y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &s) in ga.data_mut().iter_mut().zip(gd).zip(out) {
                        *x += gy * s * (T::one() - s);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = kernels::axis_layout(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| o * dim * inner + k * inner + i;
                            let mut dot = T::zero();
                            for k in 0..dim {
                                dot += gd[idx(k)] * y[idx(k)];
                            }
                            for k in 0..dim {
                                gxd[idx(k)] += y[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let cols = node.value.cols();
                let vg = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    let ggd = gg.data_mut();
                    for (grow, hrow) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((x, &gy), &h) in ggd.iter_mut().zip(grow).zip(hrow) {
                            *x += gy * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    let gbd = gb.data_mut();
                    for grow in gd.chunks(cols) {
                        add_into(gbd, grow);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let c = T::lit(cols as f64);
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, ((gxrow, grow), hrow)) in
                        gx.data_mut().chunks_mut(cols).zip(gd.chunks(cols)).zip(xhat.chunks(cols)).enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..cols {
                            dxhat[j] = grow[j] * vg[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hrow[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..cols {
                            gxrow[j] += inv / c * (c * dxhat[j] - sum_d - hrow[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.data_mut() {
                        *x += g0;
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                let g0 = gd[0] / n;
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.data_mut() {
                        *x += g0;
                    }
                }
            }
            Op::AbsSum(a) => {
                let g0 = gd[0];
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &y) in ga.data_mut().iter_mut().zip(va) {
                        let sign = if y > T::zero() {
                            T::one()
                        } else if y < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *x += g0 * sign;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga.data_mut(), gd);
                }
            }
            Op::GatherRows { src, index } => {
                let cols = node.value.cols();
                if let Some(gs) = self.acc(grads, *src) {
                    let gsd = gs.data_mut();
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut gsd[i * cols..(i + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp.data_mut(), &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                self.attention_backward(gd, *q, *k, *v, *batch, *heads, probs, grads);
            }
            Op::Mse { pred, target } => {
                let vp = self.value(*pred).data();
                let coef = gd[0] * T::lit(2.0) / T::lit(vp.len() as f64);
                if let Some(gp) = self.acc(grads, *pred) {
                    for ((x, &p), &t) in gp.data_mut().iter_mut().zip(vp).zip(target.data()) {
                        *x += coef * (p - t);
                    }
                }
            }
            Op::CrossEntropy { logits, classes, probs } => {
                let k = self.value(*logits).cols();
                let coef = gd[0] / T::lit(classes.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    let gld = gl.data_mut();
                    for (r, &c) in classes.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == c { T::one() } else { T::zero() };
                            gld[r * k + j] += coef * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[T],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (rows, c) = (self.shape(q)[0], self.shape(q)[1]);
        let n = rows / batch;
        let d = c / heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); rows * c];
        let mut dk = vec![T::zero(); rows * c];
        let mut dv = vec![T::zero(); rows * c];
        let mut ds = vec![T::zero(); n];
        let at = |b: usize, i: usize, h: usize| (b * n + i) * c + h * d;
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                for i in 0..n {
                    let go = &gd[at(b, i, h)..at(b, i, h) + d];
                    let prow = &p[i * n..(i + 1) * n];
                    // dP[i,j] = dO[i]·V[j]; dV[j] += P[i,j]·dO[i]
                    let mut dot = T::zero();
                    for j in 0..n {
                        let vj = &vd[at(b, j, h)..at(b, j, h) + d];
                        let mut acc = T::zero();
                        for (&x, &y) in go.iter().zip(vj) {
                            acc += x * y;
                        }
                        ds[j] = acc;
                        dot += acc * prow[j];
                        let dvj = &mut dv[at(b, j, h)..at(b, j, h) + d];
                        for (o, &x) in dvj.iter_mut().zip(go) {
                            *o += prow[j] * x;
                        }
                    }
                    // dS = P ∘ (dP − rowsum(dP ∘ P)), pre-scaled
                    for j in 0..n {
                        ds[j] = prow[j] * (ds[j] - dot) * scale;
                    }
                    let qi_off = at(b, i, h);
                    for j in 0..n {
                        let kj_off = at(b, j, h);
                        let w = ds[j];
                        for t in 0..d {
                            dq[qi_off + t] += w * kd[kj_off + t];
                            dk[kj_off + t] += w * qd[qi_off + t];
                        }
                    }
                }
            }
        }
        for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = self.acc(grads, id) {
                add_into(gx.data_mut(), &buf);
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}
