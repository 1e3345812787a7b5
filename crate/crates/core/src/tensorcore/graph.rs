//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! borrowed rather than copied; a graph lives for one forward/backward pass.

use std::collections::HashMap;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    RmsNorm { x: Var, w: Var, inv: Vec<f32> },
    Softmax(Var),
    L2Normalize { x: Var, norms: Vec<f32> },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    Rope { x: Var, positions: Vec<usize>, heads: usize, theta: f32 },
    Attention { q: Var, k: Var, v: Var, mask: Vec<f32>, heads: usize, probs: Vec<f32> },
    Dropout { x: Var, keep: Vec<f32> },
    MaxSim { q: Var, d: Var, best: Vec<usize> },
    Stack(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
    Sum(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. `'p` is the lifetime of borrowed parameter tensors.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaf: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient accumulated into a leaf, if any flowed there.
    pub fn of(&self, v: Var) -> Option<&[f32]> {
        self.leaf.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter key, gradient)` for every registered parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.params
            .iter()
            .filter_map(|(key, v)| self.of(*v).map(|g| (*key, g)))
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a parameter leaf, borrowing its storage. Registering the same
    /// key twice returns the same node, so tied tensors share one leaf.
    pub fn param(&mut self, key: usize, tensor: &'p Tensor) -> Var {
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Value::Borrowed(tensor),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
        });
        self.params.insert(key, v);
        v
    }

    /// Leaf that owns its value. Gradients are tracked when `requires_grad`.
    pub fn input(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Value::Owned(tensor),
            op: Op::Leaf,
            requires_grad,
        });
        v
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.input(tensor, false)
    }

    fn push(&mut self, op_name: &'static str, t: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            requires_grad,
        });
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`; with `b` a `[out×in]` weight this is a linear layer on row vectors.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * kernels::sigmoid(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("silu", t, Op::Silu(a), &[a])
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(w).numel() != d {
            return Err(Error::Dimension(format!(
                "rmsnorm weight {} vs last extent {d}",
                self.value(w).numel()
            )));
        }
        let (out, inv) = kernels::rmsnorm(self.value(x).data(), self.value(w).data(), eps);
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("rmsnorm", t, Op::RmsNorm { x, w, inv }, &[x, w])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = super::ops::softmax_lastdim(self.value(x))?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let mut out = xt.data().to_vec();
        let mut norms = Vec::with_capacity(xt.rows());
        for (row, r) in out.chunks_exact_mut(c).enumerate() {
            let norm = kernels::dot(r, r).sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::DegenerateRow { row, norm });
            }
            r.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        self.push("l2_normalize_rows", t, Op::L2Normalize { x, norms }, &[x])
    }

    /// Selects rows of a matrix by index (embedding lookup, padding removal).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows needs at least one index"));
        }
        let tt = self.value(table);
        let (rows, c) = dims(tt);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(Error::Dimension(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        let ids = ids.to_vec();
        self.push("gather_rows", t, Op::GatherRows { table, ids }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Empty("concat_rows needs at least one part"));
        };
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(Error::Dimension(format!("concat_rows: {} vs {c} columns", t.cols())));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / c;
        let t = Tensor::matrix(rows, c, out)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rotary position encoding over `heads` equal column groups; row `i` sits
    /// at absolute position `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, theta: f32) -> Result<Var> {
        let xt = self.value(x);
        let (rows, c) = dims(xt);
        if rows != positions.len() || c % heads != 0 || !(c / heads).is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "rope: {rows}x{c} with {} positions and {heads} heads",
                positions.len()
            )));
        }
        let mut out = xt.data().to_vec();
        kernels::rope(&mut out, positions, heads, theta, false);
        let t = Tensor::matrix(rows, c, out)?;
        let positions = positions.to_vec();
        self.push("rope", t, Op::Rope { x, positions, heads, theta }, &[x])
    }

    /// Multi-head scaled dot-product attention with an additive mask of shape
    /// `[queries × keys]`. Masked (`-inf`) keys are skipped; a query row with no
    /// unmasked key (a padding position) yields a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Vec<f32>, heads: usize) -> Result<Var> {
        let (s, d) = dims(self.value(q));
        let (t, dk) = dims(self.value(k));
        let (tv, dv) = dims(self.value(v));
        if dk != d || dv != d || tv != t || mask.len() != s * t || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: q {s}x{d}, k {t}x{dk}, v {tv}x{dv}, mask {}, heads {heads}",
                mask.len()
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; s * d];
        let mut probs = vec![0.0f32; s * heads * t];
        let mut scores = vec![0.0f32; t];
        for i in 0..s {
            let mrow = &mask[i * t..(i + 1) * t];
            for h in 0..heads {
                let qi = &qd[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..t {
                    scores[j] = if mrow[j] == f32::NEG_INFINITY {
                        f32::NEG_INFINITY
                    } else {
                        kernels::dot(qi, &kd[j * d + h * hd..j * d + (h + 1) * hd]) * scale + mrow[j]
                    };
                }
                let p = &mut probs[(i * heads + h) * t..(i * heads + h + 1) * t];
                if !kernels::softmax_row(&scores, p) {
                    continue;
                }
                let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..t {
                    if mrow[j] == f32::NEG_INFINITY {
                        continue;
                    }
                    let pj = p[j];
                    for (oc, &vc) in o.iter_mut().zip(&vd[j * d + h * hd..j * d + (h + 1) * hd]) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        let t_out = Tensor::matrix(s, d, out)?;
        self.push(
            "attention",
            t_out,
            Op::Attention { q, k, v, mask, heads, probs },
            &[q, k, v],
        )
    }

    /// Inverted dropout with an explicit keep mask (`0` or `1/(1-p)` per entry).
    pub fn dropout(&mut self, x: Var, keep: Vec<f32>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::Dimension("dropout mask size".into()));
        }
        let data = self.value(x).data().iter().zip(&keep).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, keep }, &[x])
    }

    /// Late-interaction score: sum over rows of `q` of the maximum dot product
    /// against any row of `d`. Returns a 1×1 node.
    pub fn maxsim(&mut self, q: Var, d: Var) -> Result<Var> {
        let (qt, dt) = (self.value(q), self.value(d));
        if qt.cols() != dt.cols() {
            return Err(Error::Dimension(format!("maxsim: dim {} vs {}", qt.cols(), dt.cols())));
        }
        let (score, best) = kernels::maxsim(qt.data(), dt.data(), qt.cols());
        let t = Tensor::matrix(1, 1, vec![score])?;
        self.push("maxsim", t, Op::MaxSim { q, d, best }, &[q, d])
    }

    /// Arranges 1×1 nodes into a `rows × cols` matrix (row-major).
    pub fn stack(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if scalars.len() != rows * cols || scalars.is_empty() {
            return Err(Error::Dimension(format!("stack {} into {rows}x{cols}", scalars.len())));
        }
        let mut data = Vec::with_capacity(scalars.len());
        for s in scalars {
            let t = self.value(*s);
            if t.numel() != 1 {
                return Err(Error::Dimension("stack expects 1x1 nodes".into()));
            }
            data.push(t.data()[0]);
        }
        let t = Tensor::matrix(rows, cols, data)?;
        self.push("stack", t, Op::Stack(scalars.to_vec()), scalars)
    }

    /// Mean cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, c) = dims(lt);
        if targets.len() != rows {
            return Err(Error::Dimension(format!("{} targets for {rows} rows", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy needs at least one target"));
        }
        let mut probs = vec![0.0f32; rows * c];
        let mut total = 0.0f32;
        for (i, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            if tgt >= c {
                return Err(Error::Dimension(format!("target {tgt} out of {c} classes")));
            }
            let row = lt.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row {
                sum += (v - max).exp();
            }
            let log_sum = sum.ln();
            total += log_sum - (row[tgt] - max);
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = ((v - max) - log_sum).exp();
            }
        }
        let t = Tensor::matrix(1, 1, vec![total / count as f32])?;
        let targets = targets.to_vec();
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy { logits, targets, probs, count },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0f32;
        for v in self.value(x).data() {
            acc += v;
        }
        let t = Tensor::matrix(1, 1, vec![acc])?;
        self.push("sum", t, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        let mut leaf: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = node.value.tensor();
            let mut acc = |v: Var, contrib: Vec<f32>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => leaf[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k) = dims(at);
                    let nn = bt.cols();
                    if self.requires_grad(*a) {
                        acc(*a, kernels::matmul_bt(&g, bt.data(), m, nn, k));
                    }
                    if self.requires_grad(*b) {
                        let a_t = kernels::transpose(at.data(), m, k);
                        acc(*b, kernels::matmul(&a_t, &g, k, m, nn));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k) = dims(at);
                    let nn = bt.rows();
                    if self.requires_grad(*a) {
                        acc(*a, kernels::matmul(&g, bt.data(), m, nn, k));
                    }
                    if self.requires_grad(*b) {
                        let g_t = kernels::transpose(&g, m, nn);
                        acc(*b, kernels::matmul(&g_t, at.data(), nn, m, k));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                    acc(*b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Silu(a) => {
                    let xd = self.value(*a).data();
                    acc(
                        *a,
                        g.iter()
                            .zip(xd)
                            .map(|(g, &x)| {
                                let s = kernels::sigmoid(x);
                                g * s * (1.0 + x * (1.0 - s))
                            })
                            .collect(),
                    );
                }
                Op::RmsNorm { x, w, inv } => {
                    let (xt, wd) = (self.value(*x), self.value(*w).data());
                    let d = wd.len();
                    let xd = xt.data();
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0f32; xd.len()];
                        for (r, &ri) in inv.iter().enumerate() {
                            let xr = &xd[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let mut s = 0.0f32;
                            for j in 0..d {
                                s += gr[j] * wd[j] * xr[j];
                            }
                            let coef = ri * ri * ri * s / d as f32;
                            for j in 0..d {
                                dx[r * d + j] = ri * gr[j] * wd[j] - xr[j] * coef;
                            }
                        }
                        acc(*x, dx);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![0.0f32; d];
                        for (r, &ri) in inv.iter().enumerate() {
                            for j in 0..d {
                                dw[j] += g[r * d + j] * xd[r * d + j] * ri;
                            }
                        }
                        acc(*w, dw);
                    }
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let y = out.data();
                    let mut dx = vec![0.0f32; y.len()];
                    for r in 0..out.rows() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            dx[r * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    acc(*a, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let c = out.cols();
                    let y = out.data();
                    let mut dx = vec![0.0f32; y.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            dx[r * c + j] = (gr[j] - yr[j] * s) / norm;
                        }
                    }
                    acc(*x, dx);
                }
                Op::GatherRows { table, ids } => {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let mut dt = vec![0.0f32; tt.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[i * c + j];
                        }
                    }
                    acc(*table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        acc(*p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Rope { x, positions, heads, theta } => {
                    let mut dx = g;
                    kernels::rope(&mut dx, positions, *heads, *theta, true);
                    acc(*x, dx);
                }
                Op::Attention { q, k, v, mask, heads, probs } => {
                    let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                    let (s, d) = dims(qt);
                    let t = kt.rows();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f32).sqrt();
                    let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
                    let mut dq = vec![0.0f32; s * d];
                    let mut dk = vec![0.0f32; t * d];
                    let mut dv = vec![0.0f32; t * d];
                    let mut dp = vec![0.0f32; t];
                    for i in 0..s {
                        let mrow = &mask[i * t..(i + 1) * t];
                        for h in 0..*heads {
                            let p = &probs[(i * heads + h) * t..(i * heads + h + 1) * t];
                            let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
                            let mut weighted = 0.0f32;
                            let mut any = false;
                            for j in 0..t {
                                if mrow[j] == f32::NEG_INFINITY {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                any = true;
                                let vj = &vd[j * d + h * hd..j * d + (h + 1) * hd];
                                dp[j] = kernels::dot(go, vj);
                                weighted += p[j] * dp[j];
                                for (dvc, &gc) in dv[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(go) {
                                    *dvc += p[j] * gc;
                                }
                            }
                            if !any {
                                continue;
                            }
                            let qi = &qd[i * d + h * hd..i * d + (h + 1) * hd];
                            for j in 0..t {
                                if mrow[j] == f32::NEG_INFINITY {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let kj = &kd[j * d + h * hd..j * d + (h + 1) * hd];
                                for c in 0..hd {
                                    dq[i * d + h * hd + c] += ds * kj[c];
                                    dk[j * d + h * hd + c] += ds * qi[c];
                                }
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Dropout { x, keep } => acc(*x, g.iter().zip(keep).map(|(g, m)| g * m).collect()),
                Op::MaxSim { q, d, best } => {
                    let (qt, dt) = (self.value(*q), self.value(*d));
                    let c = qt.cols();
                    let mut dq = vec![0.0f32; qt.numel()];
                    let mut dd = vec![0.0f32; dt.numel()];
                    for (i, &j) in best.iter().enumerate() {
                        for k in 0..c {
                            dq[i * c + k] += g[0] * dt.data()[j * c + k];
                            dd[j * c + k] += g[0] * qt.data()[i * c + k];
                        }
                    }
                    acc(*q, dq);
                    acc(*d, dd);
                }
                Op::Stack(parts) => {
                    for (p, gv) in parts.iter().zip(&g) {
                        acc(*p, vec![*gv]);
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let c = self.value(*logits).cols();
                    let mut dl = vec![0.0f32; probs.len()];
                    let w = g[0] / *count as f32;
                    for (i, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = *tgt else { continue };
                        for j in 0..c {
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            dl[i * c + j] = (probs[i * c + j] - onehot) * w;
                        }
                    }
                    acc(*logits, dl);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            }
        }

        let params = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        Ok(Gradients { leaf, params })
    }
}
