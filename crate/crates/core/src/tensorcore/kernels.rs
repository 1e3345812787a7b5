//! Slice-level kernels shared by the value API and the autodiff graph.
//!
//! Every reduction accumulates sequentially in index order, and each output
//! row depends only on its own input row, so computing a row alone or as part
//! of a larger batch yields identical bits.

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&coef, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`. Accumulation order per element matches a sequential
/// dot product over `k`.
pub(crate) fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row. `-inf` entries map to exactly zero.
/// Returns `false` (leaving `out` zeroed) if every entry is `-inf`.
pub(crate) fn softmax_row(x: &[f32], out: &mut [f32]) -> bool {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        out.fill(0.0);
        return false;
    }
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v == f32::NEG_INFINITY {
            0.0
        } else {
            (v - max).exp()
        };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// Returns the per-row `1/sqrt(mean(x²)+eps)` factors alongside the output.
pub(crate) fn rmsnorm(x: &[f32], w: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let d = w.len();
    let mut out = vec![0.0f32; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mut ss = 0.0f32;
        for v in row {
            ss += v * v;
        }
        let r = 1.0 / (ss / d as f32 + eps).sqrt();
        for ((o, &v), &wv) in o.iter_mut().zip(row).zip(w) {
            *o = v * r * wv;
        }
        inv.push(r);
    }
    (out, inv)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Sum over query rows of the best dot product against any document row,
/// together with the winning document row per query row (lowest index on ties).
/// Accumulates in `f64`.
pub(crate) fn maxsim(q: &[f32], d: &[f32], dim: usize) -> (f32, Vec<usize>) {
    let mut total = 0.0f64;
    let mut best_rows = Vec::with_capacity(q.len() / dim);
    for q_row in q.chunks_exact(dim) {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0;
        for (j, d_row) in d.chunks_exact(dim).enumerate() {
            let s: f64 = q_row.iter().zip(d_row).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            if s > best {
                best = s;
                best_j = j;
            }
        }
        total += best;
        best_rows.push(best_j);
    }
    (total as f32, best_rows)
}

/// Rotary angle for `position` and frequency index `i` of a head of width `head_dim`.
pub(crate) fn rope_angle(position: usize, i: usize, head_dim: usize, theta: f32) -> (f32, f32) {
    let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
    let angle = position as f64 * freq;
    (angle.cos() as f32, angle.sin() as f32)
}

/// Rotate-half rotary embedding applied in place. `inverse` applies the
/// transpose rotation (used for the backward pass).
pub(crate) fn rope(
    x: &mut [f32],
    positions: &[usize],
    heads: usize,
    theta: f32,
    inverse: bool,
) {
    let width = x.len() / positions.len();
    let head_dim = width / heads;
    let half = head_dim / 2;
    for (row, &pos) in x.chunks_exact_mut(width).zip(positions) {
        for i in 0..half {
            let (cos, sin) = rope_angle(pos, i, head_dim, theta);
            let sin = if inverse { -sin } else { sin };
            for h in 0..heads {
                let base = h * head_dim;
                let x1 = row[base + i];
                let x2 = row[base + i + half];
                row[base + i] = x1 * cos - x2 * sin;
                row[base + i + half] = x1 * sin + x2 * cos;
            }
        }
    }
}
