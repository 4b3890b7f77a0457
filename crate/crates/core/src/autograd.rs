//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] borrows the parameter store; parameter leaves read it in
//! place. Every operation appends a node holding its forward value (and any
//! cache the backward pass needs). [`Graph::backward`] walks the tape in
//! reverse and accumulates parameter gradients into a caller-owned buffer,
//! so a batch is a sequence of independent graphs sharing one buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul_acc, matmul_t_acc, t_matmul_acc, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Param(ParamId),
    Input,
    Gather { p: ParamId, ids: Vec<usize> },
    /// Elementwise max over table rows; `arg[r * cols + c]` is the winning row.
    MaxPool { p: ParamId, arg: Vec<usize> },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    AddBcast(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRows { x: NodeId, idx: Vec<usize> },
    Gelu(NodeId),
    LayerNorm { x: NodeId, g: NodeId, b: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool, probs: Vec<f64> },
    Dropout { x: NodeId, mask: Vec<f64> },
    Scale(NodeId, f64),
    CrossEntropy { logits: NodeId, target: usize, allowed: Vec<usize>, probs: Vec<f64> },
    Sum(Vec<NodeId>),
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'a> Graph<'a> {
    /// Inference graph: dropout is the identity.
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params, nodes: Vec::new(), dropout: None }
    }

    /// Training graph with dropout rate `p` drawn from `rng`.
    pub fn with_dropout(params: &'a ParamStore, p: f64, rng: ChaCha8Rng) -> Self {
        let dropout = (p > 0.0).then_some((p, rng));
        Self { params, nodes: Vec::new(), dropout }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let n = &self.nodes[id.0];
        match (&n.value, &n.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            (None, _) => unreachable!("only parameter leaves have no stored value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "not a scalar");
        v.data[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        self.nodes.push(Node { value: None, op: Op::Param(p) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Rows `ids` of parameter table `p`.
    pub fn gather(&mut self, p: ParamId, ids: &[usize]) -> NodeId {
        let table = self.params.get(p);
        let mut out = Tensor::zeros(ids.len(), table.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        self.push(out, Op::Gather { p, ids: ids.to_vec() })
    }

    /// One output row per id set: elementwise max over the table rows named
    /// by the set. Sets must be non-empty; ties go to the earliest id.
    pub fn max_pool_rows(&mut self, p: ParamId, sets: &[Vec<usize>]) -> NodeId {
        let table = self.params.get(p);
        let cols = table.cols;
        let mut out = Tensor::zeros(sets.len(), cols);
        let mut arg = vec![0usize; sets.len() * cols];
        for (r, set) in sets.iter().enumerate() {
            assert!(!set.is_empty(), "max-pool over an empty id set");
            let row = out.row_mut(r);
            row.copy_from_slice(table.row(set[0]));
            arg[r * cols..(r + 1) * cols].fill(set[0]);
            for &i in &set[1..] {
                for (c, &v) in table.row(i).iter().enumerate() {
                    if v > row[c] {
                        row[c] = v;
                        arg[r * cols + c] = i;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool { p, arg })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        matmul_acc(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.cols);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_t shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.rows);
        matmul_t_acc(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.rows);
        self.push(out, Op::MatMulT(a, b))
    }

    /// `x · w + b` with `b` a 1×m row broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, wv.rows, "linear shape mismatch");
        assert_eq!(bv.shape(), (1, wv.cols), "linear bias shape");
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&bv.data);
        }
        matmul_acc(&xv.data, &wv.data, &mut out.data, xv.rows, xv.cols, wv.cols);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(out.shape(), bv.shape(), "add shape mismatch");
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` where `b` is 1×cols (row broadcast) or 1×1 (scalar broadcast).
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert!(bv.rows == 1 && (bv.cols == out.cols || bv.cols == 1), "add_bcast shape mismatch");
        let cols = out.cols;
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += if bv.cols == 1 { bv.data[0] } else { bv.data[i % cols] };
        }
        self.push(out, Op::AddBcast(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::SelectRows { x, idx: idx.to_vec() })
    }

    /// Tanh-approximated GELU (smooth, so finite differences stay valid).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalization with gain `g` and bias `b` (both 1×cols).
    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let (n, d) = xv.shape();
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries (n×d), keys and values (m×d). With `causal`, query i sees keys
    /// 0..=i only and the softmax never touches later keys, so outputs at a
    /// prefix are bit-identical whatever follows.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        assert!(d % heads == 0, "model width {d} not divisible by {heads} heads");
        assert_eq!(kv.shape(), (m, d));
        assert_eq!(vv.shape(), (m, d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = Tensor::zeros(n, d);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let lim = if causal { (i + 1).min(m) } else { m };
                let qi = &qv.data[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..lim {
                    let kj = &kv.data[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for pj in p[..lim].iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                let o = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..lim {
                    p[j] /= z;
                    let vj = &vv.data[j * d + off..j * d + off + dh];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, causal, probs })
    }

    /// Inverted dropout; identity in inference graphs.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let Some((p, rng)) = self.dropout.as_mut() else { return x };
        let keep = 1.0 / (1.0 - *p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < *p { 0.0 } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s))
    }

    /// `-log softmax(logits)[target]` with the softmax restricted to
    /// `allowed` column indices of the 1×n logits.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize, allowed: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, 1, "cross_entropy expects a single row of logits");
        assert!(allowed.contains(&target), "target {target} is not an allowed class");
        let mx = allowed.iter().map(|&j| lv.data[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = allowed.iter().map(|&j| (lv.data[j] - mx).exp()).sum();
        let lse = mx + z.ln();
        let mut probs = vec![0.0; lv.cols];
        for &j in allowed {
            probs[j] = (lv.data[j] - lse).exp();
        }
        let loss = lse - lv.data[target];
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::CrossEntropy { logits, target, allowed: allowed.to_vec(), probs })
    }

    pub fn sum(&mut self, scalars: &[NodeId]) -> NodeId {
        let s = scalars.iter().map(|&x| self.scalar(x)).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(scalars.to_vec()))
    }

    /// Back-propagates from the scalar `root` and adds parameter gradients
    /// into `grads` (indexed like the store).
    pub fn backward(&self, root: NodeId, grads: &mut [Tensor]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer does not match the store");
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.backward_node(i, &gi, &mut g, grads);
        }
    }

    fn backward_node(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>], grads: &mut [Tensor]) {
        fn acc(g: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut Tensor {
            g[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
        }
        let shape = |id: NodeId| self.value(id).shape();
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(p) => grads[p.0].add_assign(gi),
            Op::Gather { p, ids } => {
                let t = &mut grads[p.0];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in t.row_mut(id).iter_mut().zip(gi.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::MaxPool { p, arg } => {
                let t = &mut grads[p.0];
                let cols = gi.cols;
                for (e, &row) in arg.iter().enumerate() {
                    t.data[row * cols + e % cols] += gi.data[e];
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows, av.cols, bv.cols);
                matmul_t_acc(&gi.data, &bv.data, &mut acc(g, *a, n, k).data, n, m, k);
                t_matmul_acc(&av.data, &gi.data, &mut acc(g, *b, k, m).data, n, k, m);
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = dc b, db = dcᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows, av.cols, bv.rows);
                matmul_acc(&gi.data, &bv.data, &mut acc(g, *a, n, k).data, n, m, k);
                t_matmul_acc(&gi.data, &av.data, &mut acc(g, *b, m, k).data, n, m, k);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows, xv.cols, wv.cols);
                matmul_t_acc(&gi.data, &wv.data, &mut acc(g, *x, n, k).data, n, m, k);
                t_matmul_acc(&xv.data, &gi.data, &mut acc(g, *w, k, m).data, n, k, m);
                let gb = acc(g, *b, 1, m);
                for r in 0..n {
                    for (a, v) in gb.data.iter_mut().zip(gi.row(r)) {
                        *a += v;
                    }
                }
            }
            Op::Add(a, b) => {
                let (r, c) = gi.shape();
                acc(g, *a, r, c).add_assign(gi);
                acc(g, *b, r, c).add_assign(gi);
            }
            Op::AddBcast(a, b) => {
                let (r, c) = gi.shape();
                acc(g, *a, r, c).add_assign(gi);
                let bc = shape(*b).1;
                let gb = acc(g, *b, 1, bc);
                for (e, v) in gi.data.iter().enumerate() {
                    gb.data[if bc == 1 { 0 } else { e % c }] += v;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = gi.cols;
                let mut off = 0;
                for &p in parts {
                    let (r, c) = shape(p);
                    let t = acc(g, p, r, c);
                    for row in 0..r {
                        for (a, v) in t.row_mut(row).iter_mut().zip(&gi.data[row * cols + off..row * cols + off + c]) {
                            *a += v;
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = shape(p);
                    let t = acc(g, p, r, c);
                    for (a, v) in t.data.iter_mut().zip(&gi.data[off..off + r * c]) {
                        *a += v;
                    }
                    off += r * c;
                }
            }
            Op::SelectRows { x, idx } => {
                let (r, c) = shape(*x);
                let t = acc(g, *x, r, c);
                for (o, &src) in idx.iter().enumerate() {
                    for (a, v) in t.row_mut(src).iter_mut().zip(gi.row(o)) {
                        *a += v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let (r, c) = xv.shape();
                let grads_x: Vec<f64> = xv.data.iter().zip(&gi.data).map(|(v, d)| gelu_grad(*v) * d).collect();
                let t = acc(g, *x, r, c);
                for (a, v) in t.data.iter_mut().zip(grads_x) {
                    *a += v;
                }
            }
            Op::LayerNorm { x, g: gn, b, xhat, rstd } => {
                let gv = self.value(*gn);
                let (n, d) = gi.shape();
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..n {
                    let dy = gi.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        dg[c] += dy[c] * xh[c];
                        db[c] += dy[c];
                        let dxh = dy[c] * gv.data[c];
                        s1 += dxh;
                        s2 += dxh * xh[c];
                    }
                    for c in 0..d {
                        let dxh = dy[c] * gv.data[c];
                        dx[r * d + c] = rstd[r] * (dxh - s1 / d as f64 - xh[c] * s2 / d as f64);
                    }
                }
                for (a, v) in acc(g, *x, n, d).data.iter_mut().zip(dx) {
                    *a += v;
                }
                for (a, v) in acc(g, *gn, 1, d).data.iter_mut().zip(dg) {
                    *a += v;
                }
                for (a, v) in acc(g, *b, 1, d).data.iter_mut().zip(db) {
                    *a += v;
                }
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let m = kv.rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let mut dp = vec![0.0; m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let lim = if *causal { (i + 1).min(m) } else { m };
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let go = &gi.data[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..lim {
                            let vj = &vv.data[j * d + off..j * d + off + dh];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += dp[j] * p[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (a, b) in dvj.iter_mut().zip(go) {
                                *a += p[j] * b;
                            }
                        }
                        let qi = &qv.data[i * d + off..i * d + off + dh];
                        for j in 0..lim {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.data[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kj[c];
                                dk[j * d + off + c] += ds * qi[c];
                            }
                        }
                    }
                }
                for (id, buf, rows) in [(*q, dq, n), (*k, dk, m), (*v, dv, m)] {
                    for (a, b) in acc(g, id, rows, d).data.iter_mut().zip(buf) {
                        *a += b;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let (r, c) = gi.shape();
                let t = acc(g, *x, r, c);
                for ((a, v), m) in t.data.iter_mut().zip(&gi.data).zip(mask) {
                    *a += v * m;
                }
            }
            Op::Scale(x, s) => {
                let (r, c) = gi.shape();
                let t = acc(g, *x, r, c);
                for (a, v) in t.data.iter_mut().zip(&gi.data) {
                    *a += v * s;
                }
            }
            Op::CrossEntropy { logits, target, allowed, probs } => {
                let d = gi.data[0];
                let n = probs.len();
                let t = acc(g, *logits, 1, n);
                for &j in allowed {
                    t.data[j] += d * probs[j];
                }
                t.data[*target] -= d;
            }
            Op::Sum(xs) => {
                for &x in xs {
                    acc(g, x, 1, 1).data[0] += gi.data[0];
                }
            }
        }
    }
}
