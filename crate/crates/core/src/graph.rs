//! Reverse-mode autodiff over a per-batch tape.
//!
//! A `Graph` is rebuilt for every forward pass: leaves are either trainable
//! parameters (shared, memoized per graph) or constant inputs, every
//! operation appends a node, and `backward` runs one reverse sweep that
//! accumulates gradients per parameter. The op set is exactly what the
//! encoder and classifier heads need; nothing here is generic beyond that.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Param(ParamId),
    Input,
    MatMul(NodeId, NodeId),
    /// a @ b^T
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a[m x n] + bias[1 x n]
    AddBiasRow(NodeId, NodeId),
    /// a[m x n] * gain[1 x n]
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    /// Per-row (x - mean) / sqrt(var + eps)
    NormalizeRows(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    /// Per group: columnwise max over the listed rows; empty group -> zeros.
    /// Stores the winning row per (group, col) for the backward pass.
    MaxOverGroups(NodeId, Vec<u32>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Elementwise product with a fixed inverted-dropout mask.
    Dropout(NodeId, Matrix),
    /// -sum_r logp[r, target_r], a 1x1 node.
    NllSum(NodeId, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradient of a scalar loss w.r.t. every parameter that participated.
pub struct Gradients {
    pub by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(Matrix::frobenius_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

const LN_EPS: f64 = 1e-5;
const NO_ROW: u32 = u32::MAX;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Graph<'p> {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn input(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vb.cols());
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(vb.row(0)) {
                *x += b;
            }
        }
        self.push(v, Op::AddBiasRow(a, bias))
    }

    pub fn mul_row(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let (va, vg) = (self.value(a), self.value(gain));
        assert_eq!(vg.rows(), 1);
        assert_eq!(va.cols(), vg.cols());
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, &g) in v.row_mut(r).iter_mut().zip(vg.row(0)) {
                *x *= g;
            }
        }
        self.push(v, Op::MulRow(a, gain))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            normalize_row(v.row_mut(r));
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Layer norm with learned gain and bias (each 1 x d).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let n = self.normalize_rows(a);
        let g = self.mul_row(n, gain);
        self.add_bias_row(g, bias)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            softmax_row(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            log_softmax_row(v.row_mut(r));
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(indices.len(), va.cols());
        for (r, &i) in indices.iter().enumerate() {
            v.row_mut(r).copy_from_slice(va.row(i));
        }
        self.push(v, Op::GatherRows(a, indices))
    }

    pub fn max_over_groups(&mut self, a: NodeId, groups: &[Vec<usize>]) -> NodeId {
        let va = self.value(a);
        let cols = va.cols();
        let mut v = Matrix::zeros(groups.len(), cols);
        let mut winners = vec![NO_ROW; groups.len() * cols];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let out = v.row_mut(g);
            out.copy_from_slice(va.row(rows[0]));
            let win = &mut winners[g * cols..(g + 1) * cols];
            win.fill(rows[0] as u32);
            for &r in &rows[1..] {
                for (c, &x) in va.row(r).iter().enumerate() {
                    if x > out[c] {
                        out[c] = x;
                        win[c] = r as u32;
                    }
                }
            }
        }
        self.push(v, Op::MaxOverGroups(a, winners))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[at..at + vp.cols()].copy_from_slice(vp.row(r));
            }
            at += vp.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows col mismatch");
            for r in 0..vp.rows() {
                v.row_mut(at + r).copy_from_slice(vp.row(r));
            }
            at += vp.rows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Inverted dropout; identity when `p` is zero.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let va = self.value(a);
        let mask = Matrix::from_vec(
            va.rows(),
            va.cols(),
            (0..va.numel())
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let mut v = va.clone();
        for (x, &m) in v.data_mut().iter_mut().zip(mask.data()) {
            *x *= m;
        }
        self.push(v, Op::Dropout(a, mask))
    }

    /// Summed negative log-likelihood of the target column per row.
    pub fn nll_sum(&mut self, logp: NodeId, targets: Vec<usize>) -> NodeId {
        let v = self.value(logp);
        assert_eq!(v.rows(), targets.len());
        let loss: f64 = targets.iter().enumerate().map(|(r, &t)| -v.get(r, t)).sum();
        self.push(Matrix::scalar(loss), Op::NllSum(logp, targets))
    }

    /// Mean cross-entropy from raw logits.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let n = targets.len();
        assert!(n > 0, "cross entropy over empty targets");
        let logp = self.log_softmax_rows(logits);
        let sum = self.nll_sum(logp, targets);
        self.scale(sum, 1.0 / n as f64)
    }

    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut by_param: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(pid) => match &mut by_param[pid.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_tn(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBiasRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, db);
                }
                Op::MulRow(a, gain) => {
                    let va = self.value(*a);
                    let vg = self.value(*gain);
                    let mut da = g.clone();
                    let mut dg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let arow = va.row(r);
                        for c in 0..g.cols() {
                            da.set(r, c, grow[c] * vg.get(0, c));
                            dg.row_mut(0)[c] += grow[c] * arow[c];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *gain, dg);
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.scale_assign(*s);
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    let mut da = g;
                    for (d, &x) in da.data_mut().iter_mut().zip(va.data()) {
                        *d *= gelu_deriv(x);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NormalizeRows(a) => {
                    let va = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    let n = va.cols() as f64;
                    for r in 0..va.rows() {
                        let (mean, var) = row_moments(va.row(r));
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        let grow = g.row(r);
                        let yrow = y.row(r);
                        let g_mean: f64 = grow.iter().sum::<f64>() / n;
                        let gy_mean: f64 =
                            grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<f64>() / n;
                        let _ = mean;
                        for c in 0..va.cols() {
                            da.set(r, c, inv_std * (grow[c] - g_mean - yrow[c] * gy_mean));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yrow = y.row(r);
                        let grow = g.row(r);
                        let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, yrow[c] * (grow[c] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let grow = g.row(r);
                        let gsum: f64 = grow.iter().sum();
                        let yrow = y.row(r);
                        for c in 0..y.cols() {
                            da.set(r, c, grow[c] - yrow[c].exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, indices) => {
                    // scatter rows in place; embedding tables are large and a
                    // dense temporary per gather dominates the backward pass
                    let shape = self.value(*a).shape();
                    let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
                    for (r, &idx) in indices.iter().enumerate() {
                        for (o, &x) in slot.row_mut(idx).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::MaxOverGroups(a, winners) => {
                    let va = self.value(*a);
                    let cols = va.cols();
                    let mut da = Matrix::zeros(va.rows(), cols);
                    for gi in 0..g.rows() {
                        for c in 0..cols {
                            let w = winners[gi * cols + c];
                            if w != NO_ROW {
                                let cur = da.get(w as usize, c);
                                da.set(w as usize, c, cur + g.get(gi, c));
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                        }
                        accumulate(&mut grads, p, dp);
                        at += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let mut dp = Matrix::zeros(rows, g.cols());
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        accumulate(&mut grads, p, dp);
                        at += rows;
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let va = self.value(*a);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Dropout(a, mask) => {
                    let mut da = g;
                    for (d, &m) in da.data_mut().iter_mut().zip(mask.data()) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NllSum(logp, targets) => {
                    let v = self.value(*logp);
                    let mut da = Matrix::zeros(v.rows(), v.cols());
                    let s = g.item();
                    for (r, &t) in targets.iter().enumerate() {
                        da.set(r, t, -s);
                    }
                    accumulate(&mut grads, *logp, da);
                }
            }
        }
        Gradients { by_param }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn normalize_row(row: &mut [f64]) {
    let (mean, var) = row_moments(row);
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for x in row {
        *x = (*x - mean) * inv_std;
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row {
        *x /= sum;
    }
}

fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    for x in row {
        *x -= lse;
    }
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use rand::SeedableRng;

    /// Central finite differences against every parameter coordinate of a
    /// small composed graph.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let w1 = store.register_normal("w1", 4, 5, &mut rng);
        let b1 = store.register_zeros("b1", 1, 5);
        let gain = store.register_ones("gain", 5);
        let bias = store.register_zeros("bias", 1, 5);
        let w2 = store.register_normal("w2", 5, 3, &mut rng);
        // nudge biases off zero so their gradients are informative
        for v in store.value_mut(b1).data_mut() {
            *v = gaussian(&mut rng) * 0.1;
        }

        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect());
        let targets = vec![0usize, 2, 1];

        let loss_fn = |store: &ParamStore| -> (f64, Option<Gradients>) {
            let mut g = Graph::new(store);
            let xin = g.input(x.clone());
            let w1n = g.param(w1);
            let b1n = g.param(b1);
            let gn = g.param(gain);
            let bn = g.param(bias);
            let w2n = g.param(w2);
            let h = g.matmul(xin, w1n);
            let h = g.add_bias_row(h, b1n);
            let h = g.gelu(h);
            let h = g.layer_norm(h, gn, bn);
            let groups = vec![vec![0usize, 1], vec![2], vec![]];
            let pooled = g.max_over_groups(h, &groups);
            let att = g.matmul_nt(pooled, pooled);
            let att = g.scale(att, 0.5);
            let att = g.softmax_rows(att);
            let mix = g.matmul(att, pooled);
            let logits = g.matmul(mix, w2n);
            let loss = g.cross_entropy_mean(logits, targets.clone());
            let grads = g.backward(loss);
            (g.value(loss).item(), Some(grads))
        };

        let (_, grads) = loss_fn(&store);
        let grads = grads.unwrap();
        let h = 1e-6;
        for pid in 0..store.len() {
            let shape = store.value(ParamId(pid)).shape();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = store.value(ParamId(pid)).get(r, c);
                    store.value_mut(ParamId(pid)).set(r, c, orig + h);
                    let (lp, _) = loss_fn(&store);
                    store.value_mut(ParamId(pid)).set(r, c, orig - h);
                    let (lm, _) = loss_fn(&store);
                    store.value_mut(ParamId(pid)).set(r, c, orig);
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads.get(ParamId(pid)).map(|m| m.get(r, c)).unwrap_or(0.0);
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-5,
                        "param {pid} ({r},{c}): fd={fd} analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let s = g.softmax_rows(x);
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_over_empty_group_is_zero_row() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]));
        let m = g.max_over_groups(x, &[vec![], vec![0, 1]]);
        assert_eq!(g.value(m).row(0), &[0.0, 0.0]);
        assert_eq!(g.value(m).row(1), &[3.0, 0.5]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let d = g.dropout(x, 0.0, &mut rng);
        assert_eq!(d, x);
    }
}
