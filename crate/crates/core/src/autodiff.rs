//! Reverse-mode differentiation over a tape of dense matrices.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Every op computes its value eagerly; `backward`
//! accumulates gradients in a fixed order, which keeps results bitwise
//! reproducible.

use crate::tensor::Matrix;

pub type NodeId = usize;

pub const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Matrix> },
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    RepeatRow(NodeId),
    MaskedSse { recon: NodeId, target: Matrix, weight: Matrix, denom: f64 },
    VarLoss { z: NodeId, eps: f64 },
    CovLoss(NodeId),
    LinComb(Vec<(NodeId, f64)>),
    SegLoss { logits: NodeId, target: Matrix },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Soft-Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column means and unbiased standard deviations.
fn column_stats(z: &Matrix, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let b = z.rows as f64;
    let mut mean = vec![0.0; z.cols];
    for r in 0..z.rows {
        for (m, x) in mean.iter_mut().zip(z.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b);
    let mut var = vec![0.0; z.cols];
    for r in 0..z.rows {
        for ((v, x), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let sd = var.iter().map(|v| (v / (b - 1.0) + eps).sqrt()).collect();
    (mean, sd)
}

fn centered(z: &Matrix) -> Matrix {
    let (mean, _) = column_stats(z, 0.0);
    let mut c = z.clone();
    for r in 0..c.rows {
        for (x, m) in c.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    c
}

/// `(1/D) sum_j relu(1 - sqrt(Var_j + eps))` with unbiased variance.
pub fn variance_loss_value(z: &Matrix, eps: f64) -> f64 {
    let (_, sd) = column_stats(z, eps);
    sd.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / z.cols as f64
}

/// Unbiased covariance matrix of the columns of `z`.
pub fn covariance(z: &Matrix) -> Matrix {
    let zc = centered(z);
    let mut c = zc.matmul_tn(&zc);
    c.scale(1.0 / (z.rows as f64 - 1.0));
    c
}

/// `(1/(D(D-1))) sum_{i != j} C_ij^2`, zero when `D = 1`.
pub fn covariance_loss_value(z: &Matrix) -> f64 {
    let d = z.cols;
    if d < 2 {
        return 0.0;
    }
    let c = covariance(z);
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += c.at(i, j) * c.at(i, j);
            }
        }
    }
    s / (d * (d - 1)) as f64
}

/// `0.5 * soft_dice(sigmoid(x), y) + 0.5 * mean BCE(x, y)`.
pub fn seg_loss_value(logits: &Matrix, target: &Matrix) -> f64 {
    let n = logits.data.len() as f64;
    let (mut sp, mut sy, mut spy, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in logits.data.iter().zip(&target.data) {
        let p = sigmoid(*x);
        sp += p;
        sy += y;
        spy += p * y;
        bce += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    let dice = 1.0 - (2.0 * spy + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH);
    0.5 * dice + 0.5 * bce / n
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
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

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data[0]
    }

    /// Parameter or constant input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + 1 * bias` with `bias` a `1 x cols` row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, self.value(a).cols), "bias shape");
        let mut v = self.value(a).clone();
        let b = self.value(bias).data.clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x += c);
        self.push(v, Op::AddScalar(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|x| gelu(*x)).collect());
        self.push(v, Op::Gelu(a))
    }

    /// Multi-head scaled dot-product attention over the rows of `q`, `k`, `v`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let m = kv.rows;
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let c0 = h * dh;
            let mut p = Matrix::zeros(n, m);
            for i in 0..n {
                let qi = &qv.row(i)[c0..c0 + dh];
                let scores: Vec<f64> = (0..m)
                    .map(|j| qi.iter().zip(&kv.row(j)[c0..c0 + dh]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                p.row_mut(i).copy_from_slice(&softmax_row(&scores));
            }
            for i in 0..n {
                for j in 0..m {
                    let w = p.at(i, j);
                    let vj = &vv.row(j)[c0..c0 + dh];
                    let o = &mut out.row_mut(i)[c0..c0 + dh];
                    for (x, y) in o.iter_mut().zip(vj) {
                        *x += w * y;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut out = Matrix::zeros(idx.len(), va.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(va.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Output has `n` rows; row `idx[i]` receives input row `i`, other rows are zero.
    pub fn scatter_rows(&mut self, a: NodeId, idx: Vec<usize>, n: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, idx.len(), "scatter index length");
        let mut out = Matrix::zeros(n, va.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(r));
        }
        self.push(out, Op::ScatterRows(a, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat widths");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Matrix::zeros(1, va.cols);
        for r in 0..va.rows {
            for (x, y) in out.data.iter_mut().zip(va.row(r)) {
                *x += y;
            }
        }
        out.scale(1.0 / va.rows as f64);
        self.push(out, Op::MeanRows(a))
    }

    pub fn repeat_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, 1, "repeat_row expects a single row");
        let mut data = Vec::with_capacity(n * va.cols);
        for _ in 0..n {
            data.extend_from_slice(&va.data);
        }
        let v = Matrix::from_vec(n, va.cols, data);
        self.push(v, Op::RepeatRow(a))
    }

    /// `sum(weight * (recon - target)^2) / denom`.
    pub fn masked_sse(&mut self, recon: NodeId, target: Matrix, weight: Matrix, denom: f64) -> NodeId {
        let r = self.value(recon);
        assert_eq!(r.shape(), target.shape(), "masked_sse target shape");
        assert_eq!(r.shape(), weight.shape(), "masked_sse weight shape");
        let mut s = 0.0;
        for ((x, t), w) in r.data.iter().zip(&target.data).zip(&weight.data) {
            if *w != 0.0 {
                s += w * (x - t) * (x - t);
            }
        }
        self.push(Matrix::scalar(s / denom), Op::MaskedSse { recon, target, weight, denom })
    }

    pub fn variance_loss(&mut self, z: NodeId, eps: f64) -> NodeId {
        let v = variance_loss_value(self.value(z), eps);
        self.push(Matrix::scalar(v), Op::VarLoss { z, eps })
    }

    pub fn covariance_loss(&mut self, z: NodeId) -> NodeId {
        let v = covariance_loss_value(self.value(z));
        self.push(Matrix::scalar(v), Op::CovLoss(z))
    }

    /// `sum_i c_i * s_i` over scalar nodes, accumulated left to right.
    pub fn lin_comb(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let mut acc = 0.0;
        for (i, (n, c)) in terms.iter().enumerate() {
            let t = if *c == 1.0 { self.scalar(*n) } else { c * self.scalar(*n) };
            acc = if i == 0 { t } else { acc + t };
        }
        self.push(Matrix::scalar(acc), Op::LinComb(terms))
    }

    pub fn seg_loss(&mut self, logits: NodeId, target: Matrix) -> NodeId {
        let v = seg_loss_value(self.value(logits), &target);
        self.push(Matrix::scalar(v), Op::SegLoss { logits, target })
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows, labels.len(), "one label per row");
        let mut s = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = softmax_row(l.row(r));
            s -= p[y].max(f64::MIN_POSITIVE).ln();
        }
        self.push(Matrix::scalar(s / labels.len() as f64), Op::CrossEntropy { logits, labels })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Gradients of scalar node `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root] = Some(Matrix::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], n: NodeId, d: Matrix| match &mut grads[n] {
            Some(e) => e.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddBias(a, b) => {
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (x, y) in db.data.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(grads, *a, g.clone());
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                acc(grads, *a, Matrix::from_vec(g.rows, g.cols, da));
                acc(grads, *b, Matrix::from_vec(g.rows, g.cols, db));
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[id].value;
                let d = y.cols as f64;
                let mut dx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / d;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for ((o, gi), yi) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mg - yi * mgy);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g.data.iter().zip(&va.data).map(|(gi, x)| gi * gelu_grad(*x)).collect();
                acc(grads, *a, Matrix::from_vec(g.rows, g.cols, d));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let m = kv.rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(m, d);
                let mut dv = Matrix::zeros(m, d);
                for (h, p) in probs.iter().enumerate() {
                    let c0 = h * dh;
                    for i in 0..n {
                        let go = &g.row(i)[c0..c0 + dh];
                        // dP_ij = dO_i . V_j ; dS = P * (dP - sum_j P dP)
                        let dp: Vec<f64> = (0..m)
                            .map(|j| go.iter().zip(&vv.row(j)[c0..c0 + dh]).map(|(a, b)| a * b).sum())
                            .collect();
                        let dot: f64 = (0..m).map(|j| p.at(i, j) * dp[j]).sum();
                        for j in 0..m {
                            let pij = p.at(i, j);
                            let ds = pij * (dp[j] - dot) * scale;
                            for c in 0..dh {
                                dv.data[j * d + c0 + c] += pij * go[c];
                                dq.data[i * d + c0 + c] += ds * kv.data[j * d + c0 + c];
                                dk.data[j * d + c0 + c] += ds * qv.data[i * d + c0 + c];
                            }
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows, va.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(grads, *a, da);
            }
            Op::ScatterRows(a, idx) => {
                let mut da = Matrix::zeros(idx.len(), g.cols);
                for (r, &i) in idx.iter().enumerate() {
                    da.row_mut(r).copy_from_slice(g.row(i));
                }
                acc(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    let cols = g.cols;
                    let d = Matrix::from_vec(rows, cols, g.data[off * cols..(off + rows) * cols].to_vec());
                    off += rows;
                    acc(grads, p, d);
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows;
                let mut da = Matrix::zeros(rows, g.cols);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (x, y) in da.row_mut(r).iter_mut().zip(&g.data) {
                        *x = y * inv;
                    }
                }
                acc(grads, *a, da);
            }
            Op::RepeatRow(a) => {
                let mut da = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (x, y) in da.data.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(grads, *a, da);
            }
            Op::MaskedSse { recon, target, weight, denom } => {
                let r = self.value(*recon);
                let s = g.data[0] * 2.0 / denom;
                let d = r
                    .data
                    .iter()
                    .zip(&target.data)
                    .zip(&weight.data)
                    .map(|((x, t), w)| if *w != 0.0 { s * w * (x - t) } else { 0.0 })
                    .collect();
                acc(grads, *recon, Matrix::from_vec(r.rows, r.cols, d));
            }
            Op::VarLoss { z, eps } => {
                let zv = self.value(*z);
                let (mean, sd) = column_stats(zv, *eps);
                let (b, dcols) = (zv.rows as f64, zv.cols as f64);
                let mut dz = Matrix::zeros(zv.rows, zv.cols);
                for r in 0..zv.rows {
                    for j in 0..zv.cols {
                        if 1.0 - sd[j] > 0.0 {
                            dz.data[r * zv.cols + j] =
                                -g.data[0] * (zv.at(r, j) - mean[j]) / (dcols * sd[j] * (b - 1.0));
                        }
                    }
                }
                acc(grads, *z, dz);
            }
            Op::CovLoss(z) => {
                let zv = self.value(*z);
                let d = zv.cols;
                let mut dz = Matrix::zeros(zv.rows, d);
                if d >= 2 {
                    let b = zv.rows as f64;
                    let c = covariance(zv);
                    let zc = centered(zv);
                    let norm = (d * (d - 1)) as f64;
                    // dL/dC_ij = 2 C_ij / norm off the diagonal; dC/dZc = (Zc (G + G^T)) / (B - 1)
                    let mut gm = Matrix::zeros(d, d);
                    for i in 0..d {
                        for j in 0..d {
                            if i != j {
                                gm.data[i * d + j] = 4.0 * c.at(i, j) / (norm * (b - 1.0)) * g.data[0];
                            }
                        }
                    }
                    dz = centered(&zc.matmul(&gm));
                }
                acc(grads, *z, dz);
            }
            Op::LinComb(terms) => {
                for (n, c) in terms {
                    acc(grads, *n, Matrix::scalar(c * g.data[0]));
                }
            }
            Op::SegLoss { logits, target } => {
                let x = self.value(*logits);
                let n = x.data.len() as f64;
                let p: Vec<f64> = x.data.iter().map(|v| sigmoid(*v)).collect();
                let sp: f64 = p.iter().sum();
                let sy: f64 = target.data.iter().sum();
                let spy: f64 = p.iter().zip(&target.data).map(|(a, b)| a * b).sum();
                let num = 2.0 * spy + DICE_SMOOTH;
                let den = sp + sy + DICE_SMOOTH;
                let d = p
                    .iter()
                    .zip(&target.data)
                    .map(|(pi, yi)| {
                        let ddice_dp = -(2.0 * yi * den - num) / (den * den);
                        g.data[0] * (0.5 * ddice_dp * pi * (1.0 - pi) + 0.5 * (pi - yi) / n)
                    })
                    .collect();
                acc(grads, *logits, Matrix::from_vec(x.rows, x.cols, d));
            }
            Op::CrossEntropy { logits, labels } => {
                let l = self.value(*logits);
                let b = labels.len() as f64;
                let mut d = Matrix::zeros(l.rows, l.cols);
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax_row(l.row(r));
                    for (c, pc) in p.iter().enumerate() {
                        let t = if c == y { 1.0 } else { 0.0 };
                        d.data[r * l.cols + c] = g.data[0] * (pc - t) / b;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                acc(grads, *a, Matrix::from_vec(va.rows, va.cols, vec![g.data[0]; va.data.len()]));
            }
        }
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a node, or zeros shaped like `like` when it did not affect the root.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}
