//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward operation appends a node holding its output and whatever it needs
//! for the backward sweep. Leaves marked as not requiring gradients (frozen
//! parameters, token inputs) are skipped during backpropagation, so frozen
//! weight gradients are never computed.

use crate::tensor::{gemm, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Row layout of a batch of equal-length sequences stored as `batch * seq_len` rows.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    /// Number of attendable (non-pad) positions per sequence.
    pub valid: Vec<usize>,
}

impl SeqLayout {
    pub fn full(batch: usize, seq_len: usize) -> Self {
        Self {
            batch,
            seq_len,
            valid: vec![seq_len; batch],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normed: Matrix,
        rstd: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    SelfAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<f64>,
    },
    ExpertMix {
        query: NodeId,
        keys: Vec<NodeId>,
        values: Vec<NodeId>,
        scale: f64,
        probs: Matrix,
        keep: Option<Matrix>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads[id.0].take()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension");
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            (av.data(), k, 1),
            (bv.data(), 1, k),
            0.0,
            (out.data_mut(), n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 × cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), out.cols());
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut normed = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = normed.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            rg,
        )
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let rg = self.rg(a);
        self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention within each sequence of `layout`.
    /// Keys at positions `>= layout.valid[b]` are masked out.
    pub fn self_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &SeqLayout,
        heads: usize,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.cols();
        let dh = hidden / heads;
        let t = layout.seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; layout.batch * heads * t * t];
        let mut out = Matrix::zeros(layout.rows(), hidden);
        let mut scores = vec![0.0; t];
        for b in 0..layout.batch {
            let base = b * t;
            let valid = layout.valid[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv.row(base + i)[off..off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = if j < valid {
                            let kj = &kv.row(base + j)[off..off + dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(&mut scores);
                    let p_off = ((b * heads + h) * t + i) * t;
                    probs[p_off..p_off + t].copy_from_slice(&scores);
                    let orow = &mut out.row_mut(base + i)[off..off + dh];
                    for (j, &p) in scores.iter().enumerate().take(valid) {
                        let vj = &vv.row(base + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::SelfAttention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Per-row attention over experts: row `i` attends over `keys[e].row(i)` with
    /// `query.row(i)` and mixes `values[e].row(i)`.
    ///
    /// `bias[e]` is added to expert `e`'s score; `f64::NEG_INFINITY` removes it.
    /// `keep` holds dropout multipliers applied to the probabilities (n × experts).
    pub fn expert_mix(
        &mut self,
        query: NodeId,
        keys: &[NodeId],
        values: &[NodeId],
        scale: f64,
        bias: &[f64],
        keep: Option<Matrix>,
    ) -> NodeId {
        let experts = keys.len();
        assert!(experts > 0 && values.len() == experts && bias.len() == experts);
        let qv = self.value(query);
        let (n, hidden) = (qv.rows(), qv.cols());
        let mut probs = Matrix::zeros(n, experts);
        let mut out = Matrix::zeros(n, hidden);
        let mut s = vec![0.0; experts];
        for i in 0..n {
            let qi = qv.row(i);
            for e in 0..experts {
                let ki = self.value(keys[e]).row(i);
                s[e] = qi.iter().zip(ki).map(|(a, b)| a * b).sum::<f64>() * scale + bias[e];
            }
            softmax_in_place(&mut s);
            probs.row_mut(i).copy_from_slice(&s);
            for e in 0..experts {
                let p = match &keep {
                    Some(kp) => s[e] * kp.get(i, e),
                    None => s[e],
                };
                if p == 0.0 {
                    continue;
                }
                let vi = self.value(values[e]).row(i);
                for (o, x) in out.row_mut(i).iter_mut().zip(vi) {
                    *o += p * x;
                }
            }
        }
        let rg = self.rg(query)
            || keys.iter().any(|&k| self.rg(k))
            || values.iter().any(|&v| self.rg(v));
        self.push(
            out,
            Op::ExpertMix {
                query,
                keys: keys.to_vec(),
                values: values.to_vec(),
                scale,
                probs,
                keep,
            },
            rg,
        )
    }

    /// Expert probabilities (rows × experts) recorded by an [`Tape::expert_mix`] node.
    pub fn mix_probs(&self, id: NodeId) -> Option<&Matrix> {
        match &self.nodes[id.0].op {
            Op::ExpertMix { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Backpropagates the given output gradients. Only leaf gradients are retained.
    pub fn backward(&self, seeds: Vec<(NodeId, Matrix)>) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(id).shape(), "seed gradient shape");
            accumulate(&mut grads, id, g);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = Matrix::zeros(m, k);
                    gemm(m, n, k, 1.0, (g.data(), n, 1), (bv.data(), 1, n), 0.0, (da.data_mut(), k, 1));
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(k, n);
                    gemm(k, m, n, 1.0, (av.data(), 1, k), (g.data(), n, 1), 0.0, (db.data_mut(), n, 1));
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut da = Matrix::zeros(m, k);
                    gemm(m, n, k, 1.0, (g.data(), n, 1), (bv.data(), k, 1), 0.0, (da.data_mut(), k, 1));
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(n, k);
                    gemm(n, m, k, 1.0, (g.data(), 1, n), (av.data(), k, 1), 0.0, (db.data_mut(), k, 1));
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for (d, x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d *= gelu_grad(*x);
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let cols = normed.cols();
                if self.rg(*beta) {
                    accumulate(grads, *beta, column_sums(g));
                }
                if self.rg(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for ((d, gy), xh) in dg.data_mut().iter_mut().zip(g.row(r)).zip(normed.row(r)) {
                            *d += gy * xh;
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(g.rows(), cols);
                    let mut dxh = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for ((d, gy), gm) in dxh.iter_mut().zip(g.row(r)).zip(gv.data()) {
                            *d = gy * gm;
                        }
                        let xh = normed.row(r);
                        let mean_d = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((o, d), xv) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xh) {
                            *o = rstd[r] * (d - mean_d - xv * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, x) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::SelectRows { a, rows } => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, x) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::SelfAttention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, *heads, probs, g, grads),
            Op::ExpertMix {
                query,
                keys,
                values,
                scale,
                probs,
                keep,
            } => {
                let qv = self.value(*query);
                let (n, hidden) = (qv.rows(), qv.cols());
                let experts = keys.len();
                let mut dq = Matrix::zeros(n, hidden);
                let mut dk: Vec<Matrix> = (0..experts).map(|_| Matrix::zeros(n, hidden)).collect();
                let mut dv: Vec<Matrix> = (0..experts).map(|_| Matrix::zeros(n, hidden)).collect();
                let mut dp = vec![0.0; experts];
                for i in 0..n {
                    let gi = g.row(i);
                    for e in 0..experts {
                        let mult = keep.as_ref().map_or(1.0, |kp| kp.get(i, e));
                        let p_eff = probs.get(i, e) * mult;
                        let vi = self.value(values[e]).row(i);
                        dp[e] = gi.iter().zip(vi).map(|(a, b)| a * b).sum::<f64>() * mult;
                        if p_eff != 0.0 {
                            for (d, x) in dv[e].row_mut(i).iter_mut().zip(gi) {
                                *d += p_eff * x;
                            }
                        }
                    }
                    let pr = probs.row(i);
                    let dot: f64 = pr.iter().zip(&dp).map(|(p, d)| p * d).sum();
                    for e in 0..experts {
                        let ds = pr[e] * (dp[e] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ki = self.value(keys[e]).row(i);
                        for (d, x) in dq.row_mut(i).iter_mut().zip(ki) {
                            *d += ds * x;
                        }
                        for (d, x) in dk[e].row_mut(i).iter_mut().zip(qv.row(i)) {
                            *d += ds * x;
                        }
                    }
                }
                if self.rg(*query) {
                    accumulate(grads, *query, dq);
                }
                for (e, (dke, dve)) in dk.into_iter().zip(dv).enumerate() {
                    if self.rg(keys[e]) {
                        accumulate(grads, keys[e], dke);
                    }
                    if self.rg(values[e]) {
                        accumulate(grads, values[e], dve);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &SeqLayout,
        heads: usize,
        probs: &[f64],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.cols();
        let dh = hidden / heads;
        let t = layout.seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(qv.rows(), hidden);
        let mut dk = Matrix::zeros(kv.rows(), hidden);
        let mut dvm = Matrix::zeros(vv.rows(), hidden);
        let mut dp = vec![0.0; t];
        for b in 0..layout.batch {
            let base = b * t;
            let valid = layout.valid[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let p_off = ((b * heads + h) * t + i) * t;
                    let p = &probs[p_off..p_off + t];
                    let gi = &g.row(base + i)[off..off + dh];
                    for j in 0..valid {
                        let vj = &vv.row(base + j)[off..off + dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj = &mut dvm.row_mut(base + j)[off..off + dh];
                        for (d, x) in dvj.iter_mut().zip(gi) {
                            *d += p[j] * x;
                        }
                    }
                    let dot: f64 = (0..valid).map(|j| p[j] * dp[j]).sum();
                    for j in 0..valid {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(base + j)[off..off + dh];
                        let dqi = &mut dq.row_mut(base + i)[off..off + dh];
                        for (d, x) in dqi.iter_mut().zip(kj) {
                            *d += ds * x;
                        }
                        let qi = &qv.row(base + i)[off..off + dh];
                        let dkj = &mut dk.row_mut(base + j)[off..off + dh];
                        for (d, x) in dkj.iter_mut().zip(qi) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        if self.rg(q) {
            accumulate(grads, q, dq);
        }
        if self.rg(k) {
            accumulate(grads, k, dk);
        }
        if self.rg(v) {
            accumulate(grads, v, dvm);
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sum of `weights ∘ output`, used as a scalar probe for finite differences.
    fn probe(tape: &Tape, out: NodeId, weights: &Matrix) -> f64 {
        tape.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn check_op(build: impl Fn(&mut Tape, &[NodeId]) -> NodeId, inputs: Vec<Matrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let out = build(&mut tape, &ids);
        let shape = tape.value(out).shape();
        let w = Matrix::random_normal(shape[0], shape[1], 1.0, &mut rng);
        let grads = tape.backward(vec![(out, w.clone())]);
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[idx]).cloned().unwrap_or(Matrix::zeros(input.rows(), input.cols()));
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == idx {
                                m.data_mut()[e] += delta;
                            }
                            t.leaf(m, true)
                        })
                        .collect();
                    let o = build(&mut t, &ids);
                    probe(&t, o, &w)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {idx} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_gradients() {
        check_op(|t, i| t.matmul(i[0], i[1]), vec![rand(3, 4, 1), rand(4, 2, 2)]);
        check_op(|t, i| t.matmul_nt(i[0], i[1]), vec![rand(3, 4, 1), rand(5, 4, 2)]);
    }

    #[test]
    fn elementwise_gradients() {
        check_op(|t, i| t.add_row(i[0], i[1]), vec![rand(3, 4, 1), rand(1, 4, 2)]);
        check_op(|t, i| t.gelu(i[0]), vec![rand(3, 4, 3)]);
        check_op(|t, i| t.layer_norm(i[0], i[1], i[2]), vec![rand(3, 5, 4), rand(1, 5, 5), rand(1, 5, 6)]);
    }

    #[test]
    fn gather_and_select_gradients() {
        check_op(|t, i| t.gather(i[0], &[2, 0, 2]), vec![rand(4, 3, 7)]);
        check_op(|t, i| t.select_rows(i[0], &[1, 1, 3]), vec![rand(4, 3, 8)]);
    }

    #[test]
    fn attention_gradients_with_padding() {
        let layout = SeqLayout {
            batch: 2,
            seq_len: 3,
            valid: vec![3, 2],
        };
        check_op(
            move |t, i| t.self_attention(i[0], i[1], i[2], &layout, 2),
            vec![rand(6, 4, 10), rand(6, 4, 11), rand(6, 4, 12)],
        );
    }

    #[test]
    fn expert_mix_gradients() {
        let mut keep = Matrix::filled(3, 2, 1.0);
        keep.set(1, 0, 0.0);
        keep.set(2, 1, 2.0);
        check_op(
            move |t, i| t.expert_mix(i[0], &[i[1], i[2]], &[i[3], i[4]], 0.5, &[0.0, 0.3], Some(keep.clone())),
            (0..5).map(|s| rand(3, 4, 20 + s)).collect(),
        );
    }

    #[test]
    fn expert_mix_rows_are_distributions() {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = (0..7).map(|s| tape.leaf(rand(5, 4, s), false)).collect();
        let out = tape.expert_mix(ids[0], &ids[1..4], &ids[4..7], 0.5, &[0.0; 3], None);
        let p = tape.mix_probs(out).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
