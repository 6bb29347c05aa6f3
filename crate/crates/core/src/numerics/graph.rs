//! A small reverse-mode tape over [`Tensor2`] values.
//!
//! A [`Graph`] records every operation of one forward evaluation. Leaves are
//! either constants or views of entries in a [`ParamStore`]; only trainable
//! store entries receive gradients. Graphs are built per call and never shared
//! between threads.

use super::kernels::{self, gelu, gelu_grad, NormStats};
use super::tensor::{dot, norm, Tensor2};
use crate::error::{CprError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Tensor2,
    trainable: bool,
}

/// Named tensors, each either trainable or frozen.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total scalar count over trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

/// Gradients indexed by [`ParamId`]; untouched and frozen parameters hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor2>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor2::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor2::is_finite)
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Softmax(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<NormStats>,
    },
    Gelu(NodeId),
    Normalize(NodeId, Vec<f64>),
    SelectRow(NodeId, usize),
    MeanRows(NodeId),
    Concat(Vec<NodeId>),
    RowDot(NodeId, NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor2,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    pub fn input(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf for a store entry. Frozen entries become plain constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.get(id).clone();
        if store.is_trainable(id) {
            self.push(value, Op::Param(id))
        } else {
            self.push(value, Op::Input)
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(CprError::shape(format!("add_row: {:?} onto {r}x{c}", self.shape(row))));
        }
        let mut v = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.affine(a, s, 0.0)
    }

    /// Row softmax of `a * inv_temp`.
    pub fn softmax_rows(&mut self, a: NodeId, inv_temp: f64) -> NodeId {
        let v = kernels::softmax_rows_scaled(self.value(a), inv_temp);
        self.push(v, Op::Softmax(a, inv_temp))
    }

    /// Row-wise layer norm with `1×c` affine parameters.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(CprError::shape(format!(
                "layer_norm: gamma {:?}, beta {:?} for width {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut out = Tensor2::zeros(r, c);
        let mut stats = Vec::with_capacity(r);
        {
            let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for i in 0..r {
                stats.push(kernels::layer_norm_slice(
                    xv.row(i),
                    g.data(),
                    b.data(),
                    eps,
                    out.row_mut(i),
                ));
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// L2-normalizes each row; a zero row is a degenerate-input error.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut v = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let n = norm(src.row(i));
            if !(n > 0.0) || !n.is_finite() {
                return Err(CprError::Degenerate(format!("row {i} has norm {n}")));
            }
            for x in v.row_mut(i) {
                *x /= n;
            }
            norms.push(n);
        }
        Ok(self.push(v, Op::Normalize(a, norms)))
    }

    pub fn select_row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let src = self.value(a);
        if i >= src.rows() {
            return Err(CprError::Index(format!("row {i} of a {}-row tensor", src.rows())));
        }
        let v = Tensor2::row_vector(src.row(i));
        Ok(self.push(v, Op::SelectRow(a, i)))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        if src.rows() == 0 {
            return Err(CprError::shape("mean over zero rows"));
        }
        let mut v = Tensor2::zeros(1, src.cols());
        for r in src.iter_rows() {
            for (o, x) in v.data_mut().iter_mut().zip(r) {
                *o += x;
            }
        }
        let n = src.rows() as f64;
        for o in v.data_mut() {
            *o /= n;
        }
        Ok(self.push(v, Op::MeanRows(a)))
    }

    /// Stacks the rows of `parts` in order.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| CprError::shape("concat of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(CprError::shape(format!("concat: width {} vs {cols}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Per-row dot products, `r×1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(CprError::shape(format!("row_dot {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let d: Vec<f64> = av.iter_rows().zip(bv.iter_rows()).map(|(x, y)| dot(x, y)).collect();
        let v = Tensor2::from_vec(d.len(), 1, d)?;
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Mean of all entries as a `1×1` scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        if src.is_empty() {
            return Err(CprError::shape("mean of an empty tensor"));
        }
        let v = Tensor2::scalar(src.sum() / src.len() as f64);
        Ok(self.push(v, Op::Mean(a)))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() || lv.rows() == 0 {
            return Err(CprError::shape(format!(
                "cross_entropy: {} rows for {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= lv.cols() {
                return Err(CprError::Index(format!("label {y} with {} classes", lv.cols())));
            }
            total += kernels::log_sum_exp(lv.row(i), 1.0) - lv.get(i, y);
        }
        let probs = kernels::softmax_rows_scaled(lv, 1.0);
        let v = Tensor2::scalar(total / labels.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar node, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(CprError::shape(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, Tensor2::scalar(1.0))], store)
    }

    /// Reverse pass from arbitrary nodes with caller-provided upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor2)], store: &ParamStore) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (id, g) in seeds {
            if !g.same_shape(self.value(*id)) {
                return Err(CprError::shape(format!(
                    "seed of shape {:?} for node of shape {:?}",
                    g.shape(),
                    self.shape(*id)
                )));
            }
            accumulate(&mut adj, *id, g.clone());
            last = last.max(id.0);
        }
        let mut grads = Gradients::zeros_like(store);

        for idx in (0..=last).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => grads.grads[pid.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = kernels::matmul_nt(&g, self.value(*b))?;
                    let db = kernels::matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = kernels::matmul(&g, self.value(*b))?;
                    let db = kernels::matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Tensor2::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (o, x) in dr.data_mut().iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *row, dr);
                }
                Op::Affine(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::Softmax(a, inv_temp) => {
                    let s = &node.value;
                    let mut dx = Tensor2::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let (srow, grow) = (s.row(i), g.row(i));
                        let inner = dot(srow, grow);
                        for ((o, &sv), &gv) in dx.row_mut(i).iter_mut().zip(srow).zip(grow) {
                            *o = inv_temp * sv * (gv - inner);
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let c = xv.cols();
                    let n = c as f64;
                    let mut dx = Tensor2::zeros(xv.rows(), c);
                    let mut dgamma = Tensor2::zeros(1, c);
                    let mut dbeta = Tensor2::zeros(1, c);
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for (i, &NormStats { mean, inv_std }) in stats.iter().enumerate() {
                        let grow = g.row(i);
                        for j in 0..c {
                            xhat[j] = (xv.get(i, j) - mean) * inv_std;
                            dxhat[j] = grow[j] * gam[j];
                            dgamma.data_mut()[j] += grow[j] * xhat[j];
                            dbeta.data_mut()[j] += grow[j];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat = dot(&dxhat, &xhat) / n;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::Gelu(a) => {
                    let dx = self.value(*a).zip_with(&g, |x, gv| gv * gelu_grad(x))?;
                    accumulate(&mut adj, *a, dx);
                }
                Op::Normalize(a, norms) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for (i, &norm) in norms.iter().enumerate() {
                        let (yrow, grow) = (y.row(i), g.row(i));
                        let proj = dot(yrow, grow);
                        for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yrow).zip(grow) {
                            *o = (gv - yv * proj) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::SelectRow(a, i) => {
                    let (r, c) = self.shape(*a);
                    let mut dx = Tensor2::zeros(r, c);
                    dx.row_mut(*i).copy_from_slice(g.data());
                    accumulate(&mut adj, *a, dx);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut dx = Tensor2::zeros(r, c);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for (o, &gv) in dx.row_mut(i).iter_mut().zip(g.data()) {
                            *o = gv * inv;
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(&mut adj, p, Tensor2::from_vec(r, c, slice)?);
                        offset += r;
                    }
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2::zeros(av.rows(), av.cols());
                    let mut db = Tensor2::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        let gi = g.get(i, 0);
                        for (o, &x) in da.row_mut(i).iter_mut().zip(bv.row(i)) {
                            *o = gi * x;
                        }
                        for (o, &x) in db.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = gi * x;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let v = g.data()[0] / (r * c) as f64;
                    accumulate(&mut adj, *a, Tensor2::filled(r, c, v));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dx = probs.scale(scale);
                    for (i, &y) in labels.iter().enumerate() {
                        let cur = dx.get(i, y);
                        dx.set(i, y, cur - scale);
                    }
                    accumulate(&mut adj, *logits, dx);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut store = ParamStore::new();
        let p = Tensor2::from_rows(&[vec![0.5, -2.0, 3.25]]).unwrap();
        let id = store.add("p", p.clone(), true);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let sq = g.row_dot(x, x).unwrap();
        let loss = g.scale(sq, 0.5);
        let grads = g.backward(loss, &store).unwrap();
        assert!(grads.get(id).bit_eq(&p));
    }

    #[test]
    fn frozen_and_unused_params_get_zero() {
        let mut store = ParamStore::new();
        let frozen = store.add("tokens", Tensor2::filled(2, 2, 1.0), false);
        let used = store.add("w", Tensor2::filled(2, 2, 0.5), true);
        let unused = store.add("dead", Tensor2::filled(1, 3, 2.0), true);
        let mut g = Graph::new();
        let a = g.param(&store, frozen);
        let b = g.param(&store, used);
        let m = g.matmul(a, b).unwrap();
        let loss = g.mean(m).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        assert!(grads.get(frozen).data().iter().all(|&x| x == 0.0));
        assert!(grads.get(unused).data().iter().all(|&x| x == 0.0));
        assert!(grads.get(used).data().iter().all(|&x| x != 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor2::zeros(2, 2));
        assert!(g.backward(x, &store).is_err());
    }
}
