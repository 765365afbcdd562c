//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every primitive appends one node whose inputs always precede it, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        ignore: Option<usize>,
        probs: Vec<f64>,
        scale: f64,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::GatherRows { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'s> Graph<'s> {
    /// A graph that records everything needed for `backward`.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A forward-only graph; `backward` is rejected.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape_of(a);
        let (k2, n) = self.shape_of(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape_of(a);
        let (n, k2) = self.shape_of(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}×{k}] · [{n}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Add(a, b)))
    }

    /// Adds a `[1 × n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape_of(a);
        if self.shape_of(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("[{r}×{c}] + {:?}", self.shape_of(row)),
            ));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|x| x.max(0.0)).collect())
            .expect("same shape");
        self.push(out, Op::Relu(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax"));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a)))
    }

    /// Row-wise layer normalisation with `[1 × n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        if c < 2 {
            return Err(Error::shape("layer_norm", "feature axis must have length >= 2"));
        }
        if self.shape_of(gain) != (1, c) || self.shape_of(bias) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x [{r}×{c}], gain {:?}, bias {:?}",
                    self.shape_of(gain),
                    self.shape_of(bias)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let denom = (var + eps).sqrt();
            let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(r, c, out)?, op))
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.shape_of(table);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, op))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape_of(x);
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::matrix(idx.len(), c, out)?, op))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.shape_of(v).0)
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&v| self.shape_of(v).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&v| self.shape_of(v).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n × d]`, `k` and `v` are `[m × d]`. With `causal`, query `i`
    /// sees keys `j <= i + (m - n)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.shape_of(q);
        let (m, dk) = self.shape_of(k);
        if dk != d || self.shape_of(v) != (m, d) || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!(
                    "q [{n}×{d}], k [{m}×{dk}], v {:?}, heads {heads}",
                    self.shape_of(v)
                ),
            ));
        }
        if causal && m < n {
            return Err(Error::shape("attention", "causal attention needs m >= n"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let offset = m - n.min(m);
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let visible = if causal { (i + offset + 1).min(m) } else { m };
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                for j in 0..visible {
                    p[j] = dot(qi, &kd[j * d + c0..j * d + c0 + dh]) * scale;
                }
                softmax_in_place(&mut p[..visible]);
                let o = &mut out[i * d + c0..i * d + c0 + dh];
                for j in 0..visible {
                    let pj = p[j];
                    for (ov, vv) in o.iter_mut().zip(&vd[j * d + c0..j * d + c0 + dh]) {
                        *ov += pj * vv;
                    }
                }
            }
        }
        if !self.grad_enabled {
            probs = Vec::new();
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        Ok(self.push(Tensor::matrix(n, d, out)?, op))
    }

    /// Label-smoothed cross-entropy of row-wise logits against class targets.
    ///
    /// The smoothed target puts `1 - smoothing` on the gold class plus
    /// `smoothing / V` on every class. Rows whose target equals `ignore`
    /// contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (r, c) = self.shape_of(logits);
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} logit rows vs {} targets", targets.len()),
            ));
        }
        let lg = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy classes",
                    index: t,
                    size: c,
                });
            }
            let row = &lg[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut loss = (1.0 - smoothing) * (lse - row[t]);
            if smoothing > 0.0 {
                let mean_nll = row.iter().map(|x| lse - x).sum::<f64>() / c as f64;
                loss += smoothing * mean_nll;
            }
            total += loss;
            count += 1;
            for (p, x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        if count == 0 {
            return Err(Error::Invalid(
                "cross_entropy: every target is the ignore index".into(),
            ));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing,
            ignore,
            probs,
            scale,
        };
        Ok(self.push(Tensor::scalar(total * scale), op))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Inverted dropout; identity when `p == 0` or the graph is forward-only.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 || !self.grad_enabled {
            return x;
        }
        let keep = 1.0 - p;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::matrix(t.rows(), t.cols(), out).expect("same shape");
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Parameters that the loss does not reach receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Graph("backward on a forward-only graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("loss variable does not belong to this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.op.inputs().iter().any(|v| v.0 >= idx) {
                return Err(Error::Graph(format!("cycle detected at node {idx}")));
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.shape_of(v);
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (a, b) in out.grads[id.index()].data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = shape(*a);
                let n = shape(*b).1;
                matmul_bt_acc(g, val(*b), slot(grads, *a, m * k), m, n, k);
                matmul_at_acc(val(*a), g, slot(grads, *b, k * n), m, k, n);
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = shape(*a);
                let n = shape(*b).0;
                matmul_acc(g, val(*b), slot(grads, *a, m * k), m, n, k);
                matmul_at_acc(g, val(*a), slot(grads, *b, n * k), m, n, k);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::AddRow(a, row) => {
                add_into(slot(grads, *a, g.len()), g);
                let c = shape(*row).1;
                let gr = slot(grads, *row, c);
                for chunk in g.chunks(c) {
                    add_into(gr, chunk);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Scale(a, s) => {
                for (x, y) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *x += s * y;
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                for ((x, gy), yv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    if *yv > 0.0 {
                        *x += gy;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for r in 0..node.value.rows() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = shape(*x);
                let gv = val(*gain);
                {
                    let gg = slot(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, c);
                    for chunk in g.chunks(c) {
                        add_into(gb, chunk);
                    }
                }
                let gx = slot(grads, *x, r * c);
                let mut gxhat = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gxhat[j] = g[i * c + j] * gv[j];
                    }
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mean_g = gxhat.iter().sum::<f64>() / c as f64;
                    let mean_gx = dot(&gxhat, xh) / c as f64;
                    for j in 0..c {
                        gx[i * c + j] += inv_std[i] * (gxhat[j] - mean_g - xh[j] * mean_gx);
                    }
                }
            }
            Op::Embedding { table: src, ids } | Op::GatherRows { x: src, idx: ids } => {
                let (rows, c) = shape(*src);
                let gt = slot(grads, *src, rows * c);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = shape(p).1;
                    let gp = slot(grads, p, rows * c);
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * c..(r + 1) * c],
                            &g[r * total + offset..r * total + offset + c],
                        );
                    }
                    offset += c;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                ignore,
                probs,
                scale,
            } => {
                let (r, c) = shape(*logits);
                let up = g[0] * scale;
                let gl = slot(grads, *logits, r * c);
                let uniform = smoothing / c as f64;
                for (i, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    for j in 0..c {
                        let mut q = uniform;
                        if j == t {
                            q += 1.0 - smoothing;
                        }
                        gl[i * c + j] += up * (probs[i * c + j] - q);
                    }
                }
            }
            Op::Sum(a) => {
                for x in slot(grads, *a, self.value(*a).len()).iter_mut() {
                    *x += g[0];
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = self.shape_of(q);
        let m = self.shape_of(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; m * d];
        let mut gv = vec![0.0; m * d];
        let mut gp = vec![0.0; m];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let go = &g[i * d + c0..i * d + c0 + dh];
                for j in 0..m {
                    gp[j] = if p[j] == 0.0 {
                        0.0
                    } else {
                        dot(go, &vd[j * d + c0..j * d + c0 + dh])
                    };
                    if p[j] != 0.0 {
                        for (a, b) in gv[j * d + c0..j * d + c0 + dh].iter_mut().zip(go) {
                            *a += p[j] * b;
                        }
                    }
                }
                let s = dot(p, &gp);
                for j in 0..m {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let gs = p[j] * (gp[j] - s) * scale;
                    for c in 0..dh {
                        gq[i * d + c0 + c] += gs * kd[j * d + c0 + c];
                        gk[j * d + c0 + c] += gs * qd[i * d + c0 + c];
                    }
                }
            }
        }
        add_into(slot(grads, q, n * d), &gq);
        add_into(slot(grads, k, m * d), &gk);
        add_into(slot(grads, v, m * d), &gv);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a constant tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = out.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    out
}
