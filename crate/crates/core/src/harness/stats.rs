//! Equivalence and paired-comparison statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TostResult {
    pub mean: f64,
    /// Larger of the two one-sided p-values.
    pub p_value: f64,
    /// `1 − 2α` confidence interval of the mean.
    pub ci: (f64, f64),
    pub equivalent: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two one-sided t-tests of `mean(deltas)` against `±epsilon`.
pub fn tost_equivalence(deltas: &[f64], epsilon: f64, alpha: f64) -> Result<TostResult> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::Stats(format!("TOST needs at least 2 samples, got {n}")));
    }
    if !(epsilon > 0.0) || !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Stats(format!("invalid epsilon {epsilon} or alpha {alpha}")));
    }
    let m = mean(deltas);
    let var = deltas.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        // Every sample equals the mean, so each one-sided test is decided
        // with certainty.
        let inside = m > -epsilon && m < epsilon;
        let p_value = if inside { 0.0 } else { 1.0 };
        return Ok(TostResult {
            mean: m,
            p_value,
            ci: (m, m),
            equivalent: inside,
        });
    }
    let se = (var / n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Stats(e.to_string()))?;
    let p_lower = 1.0 - t.cdf((m + epsilon) / se);
    let p_upper = t.cdf((m - epsilon) / se);
    let p_value = p_lower.max(p_upper);
    let half = t.inverse_cdf(1.0 - alpha) * se;
    Ok(TostResult {
        mean: m,
        p_value,
        ci: (m - half, m + half),
        equivalent: p_value < alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    pub ci: (f64, f64),
    pub p_value: f64,
}

/// Percentile bootstrap of `mean(a − b)` over paired resamples. The p-value is
/// twice the smaller fraction of resampled means on either side of zero.
pub fn paired_bootstrap_ci(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Stats(format!(
            "bootstrap needs two equal-length series of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Stats(format!("invalid resamples {resamples} or level {level}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = ((tail * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - tail) * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
    let at_or_below = means.iter().filter(|m| **m <= 0.0).count();
    let at_or_above = means.iter().filter(|m| **m >= 0.0).count();
    let p_value = (2.0 * at_or_below.min(at_or_above) as f64 / resamples as f64).min(1.0);
    Ok(BootstrapResult {
        mean: mean(&diffs),
        ci: (means[lo], means[hi]),
        p_value,
    })
}

/// Ranks of `values` (1-based), ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Largest number of non-zero differences handled with the exact null.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank test of paired samples. Zero differences
/// are dropped; all-zero input gives `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX {
        // Average ranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for r in &doubled {
            for s in (*r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = 2f64.powi(n as i32);
        let observed = (w_plus * 2.0).round() as usize;
        let lower: f64 = counts[..=observed].iter().sum::<f64>() / total;
        let upper: f64 = counts[observed..].iter().sum::<f64>() / total;
        return Ok((2.0 * lower.min(upper)).min(1.0));
    }

    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w_plus - mu) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Stats(e.to_string()))?;
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0))
}
