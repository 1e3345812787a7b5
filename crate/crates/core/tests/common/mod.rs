//! Independent `f64` reference implementations and a finite-difference
//! gradient checker for the graph ops.

#![allow(dead_code)]

use dualhead_core::tensorcore::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(r * c, d.len());
        Self { r, c, d }
    }

    pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Self {
        Self::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.r, self.c, self.d.iter().map(|v| *v as f32).collect()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.rows(), t.cols(), t.data().iter().map(|v| f64::from(*v)).collect())
    }

    /// Rounds through `f32` so oracle and graph see identical inputs.
    pub fn quantized(mut self) -> Self {
        self.d.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        self
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut d = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            d[i * b.c + j] = (0..a.c).map(|k| a.at(i, k) * b.at(k, j)).sum();
        }
    }
    Mat::new(a.r, b.c, d)
}

pub fn transpose(a: &Mat) -> Mat {
    let mut d = vec![0.0; a.r * a.c];
    for i in 0..a.r {
        for j in 0..a.c {
            d[j * a.r + i] = a.at(i, j);
        }
    }
    Mat::new(a.c, a.r, d)
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat::new(a.r, a.c, a.d.iter().map(|v| f(*v)).collect())
}

pub fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::new(a.r, a.c, a.d.iter().zip(&b.d).map(|(x, y)| f(*x, *y)).collect())
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax(x: &Mat) -> Mat {
    Mat::new(x.r, x.c, (0..x.r).flat_map(|i| softmax_row(x.row(i))).collect())
}

pub fn rmsnorm(x: &Mat, w: &[f64], eps: f64) -> Mat {
    let mut d = Vec::with_capacity(x.d.len());
    for i in 0..x.r {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.c as f64;
        let r = 1.0 / (ms + eps).sqrt();
        d.extend(row.iter().zip(w).map(|(v, wv)| v * r * wv));
    }
    Mat::new(x.r, x.c, d)
}

pub fn l2_normalize(x: &Mat) -> Mat {
    let mut d = Vec::with_capacity(x.d.len());
    for i in 0..x.r {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        d.extend(x.row(i).iter().map(|v| v / n));
    }
    Mat::new(x.r, x.c, d)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotate-half rotary encoding, first half paired with second half per head.
pub fn rope(x: &Mat, positions: &[usize], heads: usize, theta: f64) -> Mat {
    let hd = x.c / heads;
    let half = hd / 2;
    let mut out = x.clone();
    for (i, &p) in positions.iter().enumerate() {
        for h in 0..heads {
            for k in 0..half {
                let angle = p as f64 / theta.powf(2.0 * k as f64 / hd as f64);
                let (a, b) = (x.at(i, h * hd + k), x.at(i, h * hd + k + half));
                out.d[i * x.c + h * hd + k] = a * angle.cos() - b * angle.sin();
                out.d[i * x.c + h * hd + k + half] = a * angle.sin() + b * angle.cos();
            }
        }
    }
    out
}

/// Multi-head attention; `allowed[i][j]` says whether query `i` may see key `j`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, allowed: &[Vec<bool>], heads: usize) -> Mat {
    let hd = q.c / heads;
    let mut out = Mat::new(q.r, q.c, vec![0.0; q.r * q.c]);
    for i in 0..q.r {
        let keys: Vec<usize> = (0..k.r).filter(|j| allowed[i][*j]).collect();
        if keys.is_empty() {
            continue;
        }
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let scores: Vec<f64> = keys
                .iter()
                .map(|j| cols.clone().map(|c| q.at(i, c) * k.at(*j, c)).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let p = softmax_row(&scores);
            for c in cols {
                out.d[i * q.c + c] = keys.iter().zip(&p).map(|(j, pj)| pj * v.at(*j, c)).sum();
            }
        }
    }
    out
}

pub fn maxsim(q: &Mat, d: &Mat) -> f64 {
    (0..q.r)
        .map(|i| {
            (0..d.r)
                .map(|j| q.row(i).iter().zip(d.row(j)).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

pub fn cross_entropy(logits: &Mat, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let p = softmax_row(logits.row(i));
            total -= p[*t].ln();
            count += 1;
        }
    }
    total / count as f64
}

/// An op instance: inputs, how to apply it on a graph, and its reference.
pub struct Case {
    pub inputs: Vec<Mat>,
    pub graph: Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>,
    pub oracle: Box<dyn Fn(&[Mat]) -> Mat>,
}

#[derive(Debug)]
pub struct GradCheck {
    pub op: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_forward: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` of analytic vs numeric gradients
/// of `Σ R ⊙ op(inputs)`, plus the forward mismatch against the oracle.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|m| g.input(m.to_tensor(), true)).collect();
    let out = (case.graph)(&mut g, &vars);
    let out_val = Mat::from_tensor(g.value(out));
    let weights = Mat::random(rng, out_val.r, out_val.c).quantized();
    let wv = g.constant(weights.to_tensor());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let reference = (case.oracle)(&case.inputs);
    let forward = out_val
        .d
        .iter()
        .zip(&reference.d)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max);

    let objective = |inputs: &[Mat]| -> f64 {
        let o = (case.oracle)(inputs);
        o.d.iter().zip(&weights.d).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (idx, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.of(*var) {
            Some(gr) => gr.iter().map(|v| f64::from(*v)).collect(),
            None => vec![0.0; case.inputs[idx].d.len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = case.inputs.clone();
        for e in 0..case.inputs[idx].d.len() {
            let x0 = case.inputs[idx].d[e];
            probe[idx].d[e] = x0 + FD_STEP;
            let up = objective(&probe);
            probe[idx].d[e] = x0 - FD_STEP;
            let down = objective(&probe);
            probe[idx].d[e] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-8);
        worst = worst.max(norm(&diff) / scale);
    }
    (worst, forward)
}

pub fn run_op(op: &'static str, instances: usize, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Case) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        op,
        instances,
        failures: 0,
        worst_rel: 0.0,
        worst_forward: 0.0,
    };
    for _ in 0..instances {
        let case = make(&mut rng);
        let (rel, fwd) = check_case(&case, &mut rng);
        report.worst_rel = report.worst_rel.max(rel);
        report.worst_forward = report.worst_forward.max(fwd);
        if rel > GRAD_TOL || fwd > 1e-4 {
            report.failures += 1;
        }
    }
    report
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::random(rng, r, c).quantized()
}

/// Keys/queries where max selections are separated by a clear gap, so the
/// finite-difference step never crosses a tie.
fn separated_maxsim_inputs(rng: &mut ChaCha8Rng) -> (Mat, Mat) {
    loop {
        let c = rng.random_range(2..6);
        let (qr, dr) = (rng.random_range(1..4), rng.random_range(1..5));
        let q = rand_mat(rng, qr, c);
        let d = rand_mat(rng, dr, c);
        let separated = (0..q.r).all(|i| {
            let mut s: Vec<f64> = (0..d.r)
                .map(|j| q.row(i).iter().zip(d.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s.len() < 2 || s[0] - s[1] > 0.05
        });
        if separated {
            return (q, d);
        }
    }
}

/// Every differentiable graph op with its instance generator.
pub fn all_gradchecks(instances: usize, seed: u64) -> Vec<GradCheck> {
    let mut out = Vec::new();
    out.push(run_op("matmul", instances, seed, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        Case {
            inputs: vec![rand_mat(rng, m, k), rand_mat(rng, k, n)],
            graph: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| matmul(&x[0], &x[1])),
        }
    }));
    out.push(run_op("matmul_bt", instances, seed + 1, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        Case {
            inputs: vec![rand_mat(rng, m, k), rand_mat(rng, n, k)],
            graph: Box::new(|g, v| g.matmul_bt(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| matmul(&x[0], &transpose(&x[1]))),
        }
    }));
    out.push(run_op("add", instances, seed + 2, |rng| {
        let (m, k) = dims(rng);
        Case {
            inputs: vec![rand_mat(rng, m, k), rand_mat(rng, m, k)],
            graph: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| zip(&x[0], &x[1], |a, b| a + b)),
        }
    }));
    out.push(run_op("mul", instances, seed + 3, |rng| {
        let (m, k) = dims(rng);
        Case {
            inputs: vec![rand_mat(rng, m, k), rand_mat(rng, m, k)],
            graph: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| zip(&x[0], &x[1], |a, b| a * b)),
        }
    }));
    out.push(run_op("scale", instances, seed + 4, |rng| {
        let (m, k) = dims(rng);
        let c = rng.random_range(-3.0f32..3.0);
        Case {
            inputs: vec![rand_mat(rng, m, k)],
            graph: Box::new(move |g, v| g.scale(v[0], c).unwrap()),
            oracle: Box::new(move |x| map(&x[0], |a| a * f64::from(c))),
        }
    }));
    out.push(run_op("silu", instances, seed + 5, |rng| {
        let (m, k) = dims(rng);
        Case {
            inputs: vec![map(&rand_mat(rng, m, k), |a| 3.0 * a).quantized()],
            graph: Box::new(|g, v| g.silu(v[0]).unwrap()),
            oracle: Box::new(|x| map(&x[0], silu)),
        }
    }));
    out.push(run_op("rmsnorm", instances, seed + 6, |rng| {
        let (m, k) = dims(rng);
        let k = k + 1;
        Case {
            inputs: vec![rand_mat(rng, m, k), rand_mat(rng, 1, k)],
            graph: Box::new(|g, v| g.rmsnorm(v[0], v[1], 1e-6).unwrap()),
            oracle: Box::new(|x| rmsnorm(&x[0], &x[1].d, 1e-6)),
        }
    }));
    out.push(run_op("softmax", instances, seed + 7, |rng| {
        let (m, k) = dims(rng);
        Case {
            inputs: vec![map(&rand_mat(rng, m, k), |a| 2.0 * a).quantized()],
            graph: Box::new(|g, v| g.softmax(v[0]).unwrap()),
            oracle: Box::new(|x| softmax(&x[0])),
        }
    }));
    out.push(run_op("l2_normalize_rows", instances, seed + 8, |rng| {
        let (m, k) = dims(rng);
        let x = loop {
            let x = rand_mat(rng, m, k + 1);
            if (0..m).all(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() > 0.1) {
                break x;
            }
        };
        Case {
            inputs: vec![x],
            graph: Box::new(|g, v| g.l2_normalize_rows(v[0]).unwrap()),
            oracle: Box::new(|x| l2_normalize(&x[0])),
        }
    }));
    out.push(run_op("gather_rows", instances, seed + 9, |rng| {
        let (m, k) = dims(rng);
        let ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..m)).collect();
        let ids2 = ids.clone();
        Case {
            inputs: vec![rand_mat(rng, m, k)],
            graph: Box::new(move |g, v| g.gather_rows(v[0], &ids).unwrap()),
            oracle: Box::new(move |x| {
                Mat::new(ids2.len(), x[0].c, ids2.iter().flat_map(|i| x[0].row(*i).to_vec()).collect())
            }),
        }
    }));
    out.push(run_op("concat_rows", instances, seed + 10, |rng| {
        let k = rng.random_range(1..5);
        let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
        Case {
            inputs: vec![rand_mat(rng, a, k), rand_mat(rng, b, k)],
            graph: Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
            oracle: Box::new(|x| {
                let mut d = x[0].d.clone();
                d.extend_from_slice(&x[1].d);
                Mat::new(x[0].r + x[1].r, x[0].c, d)
            }),
        }
    }));
    out.push(run_op("rope", instances, seed + 11, |rng| {
        let heads = rng.random_range(1..3);
        let hd = 2 * rng.random_range(1..4);
        let rows = rng.random_range(1..5);
        let positions: Vec<usize> = (0..rows).map(|_| rng.random_range(0..200)).collect();
        let p2 = positions.clone();
        Case {
            inputs: vec![rand_mat(rng, rows, heads * hd)],
            graph: Box::new(move |g, v| g.rope(v[0], &positions, heads, 10000.0).unwrap()),
            oracle: Box::new(move |x| rope(&x[0], &p2, heads, 10000.0)),
        }
    }));
    out.push(run_op("attention", instances, seed + 12, |rng| {
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let (s, t) = (rng.random_range(1..5), rng.random_range(1..6));
        let allowed: Vec<Vec<bool>> = (0..s)
            .map(|_| {
                // Every row keeps at least one key, except occasionally a
                // fully masked row to exercise the zero-output path.
                let fully_masked = rng.random_bool(0.1);
                let mut row: Vec<bool> = (0..t).map(|_| !fully_masked && rng.random_bool(0.7)).collect();
                if !fully_masked && !row.iter().any(|b| *b) {
                    row[rng.random_range(0..t)] = true;
                }
                row
            })
            .collect();
        let mask: Vec<f32> = allowed
            .iter()
            .flat_map(|r| r.iter().map(|a| if *a { 0.0 } else { f32::NEG_INFINITY }))
            .collect();
        Case {
            inputs: vec![rand_mat(rng, s, d), rand_mat(rng, t, d), rand_mat(rng, t, d)],
            graph: Box::new(move |g, v| g.attention(v[0], v[1], v[2], mask.clone(), heads).unwrap()),
            oracle: Box::new(move |x| attention(&x[0], &x[1], &x[2], &allowed, heads)),
        }
    }));
    out.push(run_op("dropout", instances, seed + 13, |rng| {
        let (m, k) = dims(rng);
        let keep: Vec<f32> = (0..m * k).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.25 }).collect();
        let k2: Vec<f64> = keep.iter().map(|v| f64::from(*v)).collect();
        Case {
            inputs: vec![rand_mat(rng, m, k)],
            graph: Box::new(move |g, v| g.dropout(v[0], keep.clone()).unwrap()),
            oracle: Box::new(move |x| Mat::new(x[0].r, x[0].c, x[0].d.iter().zip(&k2).map(|(a, b)| a * b).collect())),
        }
    }));
    out.push(run_op("maxsim", instances, seed + 14, |rng| {
        let (q, d) = separated_maxsim_inputs(rng);
        Case {
            inputs: vec![q, d],
            graph: Box::new(|g, v| g.maxsim(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| Mat::new(1, 1, vec![maxsim(&x[0], &x[1])])),
        }
    }));
    out.push(run_op("stack", instances, seed + 15, |rng| {
        let (r, c) = (rng.random_range(1..3), rng.random_range(1..3));
        let n = r * c;
        Case {
            inputs: (0..n).map(|_| rand_mat(rng, 1, 1)).collect(),
            graph: Box::new(move |g, v| g.stack(v, r, c).unwrap()),
            oracle: Box::new(move |x| Mat::new(r, c, x.iter().map(|m| m.d[0]).collect())),
        }
    }));
    out.push(run_op("cross_entropy", instances, seed + 16, |rng| {
        let (m, k) = dims(rng);
        let k = k + 1;
        let mut targets: Vec<Option<usize>> =
            (0..m).map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..k))).collect();
        if targets.iter().all(Option::is_none) {
            targets[0] = Some(0);
        }
        let t2 = targets.clone();
        Case {
            inputs: vec![map(&rand_mat(rng, m, k), |a| 3.0 * a).quantized()],
            graph: Box::new(move |g, v| g.cross_entropy(v[0], &targets).unwrap()),
            oracle: Box::new(move |x| Mat::new(1, 1, vec![cross_entropy(&x[0], &t2)])),
        }
    }));
    out.push(run_op("sum", instances, seed + 17, |rng| {
        let (m, k) = dims(rng);
        Case {
            inputs: vec![rand_mat(rng, m, k)],
            graph: Box::new(|g, v| g.sum(v[0]).unwrap()),
            oracle: Box::new(|x| Mat::new(1, 1, vec![x[0].d.iter().sum()])),
        }
    }));
    out
}

// ---- whole-model reference -------------------------------------------------

use dualhead_core::model::{Backbone, LayerKind, ModelConfig, ModelInput, ParamStore, PATCH_DIM};

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.find(name).unwrap_or_else(|| panic!("no tensor {name}")));
    let (r, c) = if t.shape().len() == 1 { (1, t.shape()[0]) } else { (t.rows(), t.cols()) };
    Mat::new(r, c, t.data().iter().map(|v| f64::from(*v)).collect())
}

/// `x·Wᵀ (+ scale·x·Aᵀ·Bᵀ)` reading tensors by name.
fn ref_linear(store: &ParamStore, x: &Mat, name: &str, adapters: bool, scale: f64) -> Mat {
    let w = param(store, &format!("{name}.weight"));
    let base = matmul(x, &transpose(&w));
    if !adapters {
        return base;
    }
    let a = param(store, &format!("{name}.lora_a"));
    let b = param(store, &format!("{name}.lora_b"));
    let low = matmul(&matmul(x, &transpose(&a)), &transpose(&b));
    zip(&base, &low, |u, v| u + scale * v)
}

/// Attention visibility rule for one layer.
pub fn allowed(kind: LayerKind, bidirectional_full: bool, valid: &[bool], i: usize, j: usize) -> bool {
    if !(valid[i] && valid[j]) {
        return false;
    }
    match kind {
        LayerKind::Full if bidirectional_full => true,
        LayerKind::Full => j <= i,
        LayerKind::Sliding(w) => j <= i && i - j < w,
    }
}

/// Whole forward pass in `f64`, written from the architecture description
/// rather than from the graph code.
pub fn reference_hidden(model: &Backbone, input: &ModelInput, adapters: bool, bidirectional_full: bool) -> Mat {
    let cfg: &ModelConfig = model.config();
    let store = model.params();
    let d = cfg.hidden_dim;
    let scale = cfg.lora_alpha as f64 / cfg.lora_rank as f64;
    let eps = f64::from(cfg.norm_eps);
    let n = input.len();
    let valid = input.validity();

    let mut rows = Vec::with_capacity(n * d);
    let fw = param(store, "featurizer");
    for p in &input.patches {
        let pm = Mat::new(1, PATCH_DIM, p.iter().map(|v| f64::from(*v)).collect());
        rows.extend(matmul(&pm, &transpose(&fw)).d);
    }
    let emb = param(store, "embed_tokens");
    for t in &input.tokens {
        rows.extend_from_slice(emb.row(*t as usize));
    }
    let mut h = Mat::new(n, d, rows);
    let positions: Vec<usize> = (0..n).collect();

    for (l, kind) in cfg.layer_schedule.iter().enumerate() {
        let p = format!("layers.{l}");
        let x = rmsnorm(&h, &param(store, &format!("{p}.attn_norm")).d, eps);
        let q = rope(&ref_linear(store, &x, &format!("{p}.q_proj"), adapters, scale), &positions, cfg.num_heads, f64::from(cfg.rope_theta));
        let k = rope(&ref_linear(store, &x, &format!("{p}.k_proj"), adapters, scale), &positions, cfg.num_heads, f64::from(cfg.rope_theta));
        let v = ref_linear(store, &x, &format!("{p}.v_proj"), adapters, scale);
        let vis: Vec<Vec<bool>> =
            (0..n).map(|i| (0..n).map(|j| allowed(*kind, bidirectional_full, &valid, i, j)).collect()).collect();
        let att = attention(&q, &k, &v, &vis, cfg.num_heads);
        let o = ref_linear(store, &att, &format!("{p}.o_proj"), adapters, scale);
        h = zip(&h, &o, |a, b| a + b);

        let x = rmsnorm(&h, &param(store, &format!("{p}.ffn_norm")).d, eps);
        let gate = ref_linear(store, &x, &format!("{p}.gate_proj"), adapters, scale);
        let up = ref_linear(store, &x, &format!("{p}.up_proj"), adapters, scale);
        let act = zip(&map(&gate, silu), &up, |a, b| a * b);
        let down = ref_linear(store, &act, &format!("{p}.down_proj"), adapters, scale);
        h = zip(&h, &down, |a, b| a + b);
    }
    rmsnorm(&h, &param(store, "final_norm").d, eps)
}

/// A small config for fast model-level tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        hidden_dim: 16,
        num_layers: 3,
        layer_schedule: vec![LayerKind::Full, LayerKind::Sliding(3), LayerKind::Full],
        num_heads: 2,
        ffn_dim: 24,
        proj_dim: 8,
        lora_rank: 4,
        lora_alpha: 8,
        lora_dropout: 0.1,
        max_seq_len: 64,
        ..ModelConfig::default()
    }
}

/// Gives every adapter `B` random values so that enabling adapters matters.
pub fn randomize_adapters(model: &mut Backbone, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .params()
        .entries()
        .filter(|(_, e)| e.name.ends_with(".lora_b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(dualhead_core::tokens::FIRST_FREE..vocab as u32)).collect()
}

pub fn random_patch(rng: &mut ChaCha8Rng) -> dualhead_core::Patch {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

pub fn hidden_of(model: &Backbone, input: &ModelInput) -> Tensor {
    let mut g = Graph::new();
    let h = model.forward_hidden(&mut g, input, None, None).unwrap();
    g.value(h).clone()
}
